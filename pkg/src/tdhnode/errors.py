"""Exception types raised across the package.

Every public operation documents which of these it can raise. All of them
derive from :class:`TDHNodeError` so callers can catch the whole family.
"""


class TDHNodeError(Exception):
    """Base class for all package errors."""


# --- hypergraph construction / ingestion -----------------------------------

class DuplicateMarkerInTrajectory(TDHNodeError, ValueError):
    """A trajectory lists the same marker more than once."""


class CycleDetected(TDHNodeError, ValueError):
    """The union of consecutive trajectory edges contains a cycle."""


class UnknownMarkerName(TDHNodeError, KeyError):
    """A trajectory or record references a marker name outside the universe."""


class IrreversibilityViolation(TDHNodeError, ValueError):
    """A marker status transitioned 1 -> 0 while strict checking was on."""


# --- encoders ---------------------------------------------------------------

class IndexOutOfRange(TDHNodeError, IndexError):
    """A positional index is outside the encoder table."""


class DimensionMismatch(TDHNodeError, ValueError):
    """An input vector or matrix has the wrong size."""


# --- laplacian / dynamics ----------------------------------------------------

class NonFiniteLaplacian(TDHNodeError, FloatingPointError):
    """NaN or Inf appeared while assembling the hypergraph Laplacian."""


class ShapeMismatch(TDHNodeError, ValueError):
    """Operands passed to the dynamics have inconsistent shapes."""


class NonFiniteState(TDHNodeError, FloatingPointError):
    """The integrated hidden state diverged or became non-finite."""


class NoRecordedForward(TDHNodeError, RuntimeError):
    """backward() was called on a loss with no recorded computation."""


# --- training / persistence --------------------------------------------------

class EmptyCohort(TDHNodeError, ValueError):
    """A training or validation cohort contains no patients."""


class NonFiniteLoss(TDHNodeError, FloatingPointError):
    """The training loss became NaN or Inf."""


class VersionMismatch(TDHNodeError, ValueError):
    """Checkpoint format version is not supported by this build."""


class PathwayHashMismatch(TDHNodeError, ValueError):
    """Checkpoint was trained against a different pathway definition."""


class CorruptFile(TDHNodeError, ValueError):
    """Checkpoint file is truncated or has invalid framing."""


# --- data ---------------------------------------------------------------------

class MalformedRecord(TDHNodeError, ValueError):
    """A cohort file line could not be parsed into a patient record."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class NonIncreasingTimestamps(TDHNodeError, ValueError):
    """Encounter timestamps are not strictly increasing."""


class ConfigInvalid(TDHNodeError, ValueError):
    """A generator or training configuration violates its invariants."""


# --- evaluation ----------------------------------------------------------------

class EmptyEvaluationSet(TDHNodeError, ValueError):
    """No (encounter, marker) pairs were eligible for evaluation."""
