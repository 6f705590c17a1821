"""Static progression hypergraph and per-patient temporally detailed views.

Markers are nodes; each clinically defined progression trajectory is one
hyperedge (an ordered sequence of distinct markers). A patient's temporally
detailed hypergraph attaches onset timestamps to the trajectory prefix the
patient has realized so far; positions not yet reached carry ``None``.

Timestamps are real-valued months since the patient's first encounter. The
unobserved sentinel is ``None`` everywhere, never an IEEE infinity.
"""

from __future__ import annotations

from dataclasses import dataclass
from graphlib import CycleError, TopologicalSorter
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CycleDetected,
    DuplicateMarkerInTrajectory,
    IrreversibilityViolation,
    NonIncreasingTimestamps,
    UnknownMarkerName,
)

Timestamp = float
OnsetValue = Optional[float]  # None means the marker has not been observed


@dataclass(frozen=True)
class MarkerId:
    """A disease complication marker: dense index plus display name."""

    index: int
    name: str


@dataclass(frozen=True)
class Trajectory:
    """One progression pathway: an ordered sequence of distinct markers."""

    id: int
    markers: tuple[MarkerId, ...]

    def __post_init__(self):
        if len(self.markers) < 2:
            raise ValueError(f"trajectory {self.id} needs at least 2 markers")
        if len({m.index for m in self.markers}) != len(self.markers):
            raise DuplicateMarkerInTrajectory(
                f"trajectory {self.id} repeats a marker"
            )

    def __len__(self) -> int:
        return len(self.markers)


@dataclass(frozen=True)
class ProgressionHypergraph:
    """Static clinical knowledge: n markers, m ordered trajectories.

    The union of consecutive-marker directed edges across trajectories must
    be acyclic; isolated markers (in no trajectory) are allowed.
    """

    markers: tuple[MarkerId, ...]
    trajectories: tuple[Trajectory, ...]

    @property
    def n(self) -> int:
        return len(self.markers)

    @property
    def m(self) -> int:
        return len(self.trajectories)

    @property
    def max_trajectory_len(self) -> int:
        return max(len(t) for t in self.trajectories)

    @property
    def marker_names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.markers)

    def marker(self, name: str) -> MarkerId:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownMarkerName(name) from None

    @property
    def _by_name(self) -> dict[str, MarkerId]:
        return {m.name: m for m in self.markers}


@dataclass(frozen=True)
class OnsetMap:
    """Per-marker first-onset timestamp, ``None`` where never observed.

    ``violations`` counts 1 -> 0 status transitions repaired in lenient mode.
    """

    onsets: tuple[OnsetValue, ...]
    violations: int = 0

    def __getitem__(self, marker_index: int) -> OnsetValue:
        return self.onsets[marker_index]


@dataclass(frozen=True)
class TDHyperedge:
    """A trajectory with per-position onset timestamps up to a frontier.

    Positions 1..frontier carry finite, nondecreasing timestamps; positions
    past the frontier carry ``None``. ``frontier == 0`` means nothing in the
    trajectory has been observed yet.
    """

    trajectory: Trajectory
    entries: tuple[OnsetValue, ...]
    frontier: int

    def __post_init__(self):
        k0 = self.frontier
        if not 0 <= k0 <= len(self.trajectory):
            raise ValueError(f"frontier {k0} outside trajectory")
        if len(self.entries) != len(self.trajectory):
            raise ValueError("one entry per trajectory position required")
        prev = None
        for pos, t in enumerate(self.entries):
            if pos < k0:
                if t is None or not np.isfinite(t) or t < 0:
                    raise ValueError("prefix entries must be finite and >= 0")
                if prev is not None and t < prev:
                    raise ValueError("prefix timestamps must be nondecreasing")
                prev = t
            elif t is not None:
                raise ValueError("entries past the frontier must be None")

    def __len__(self) -> int:
        return len(self.trajectory)


@dataclass(frozen=True)
class TDHypergraph:
    """Per-patient, time-indexed snapshot of the progression hypergraph.

    ``out_of_order`` counts markers observed by ``as_of`` that could not join
    their trajectory prefix (their predecessor was unobserved or later).
    """

    base: ProgressionHypergraph
    hyperedges: tuple[TDHyperedge, ...]
    as_of: Timestamp
    out_of_order: int = 0


def build_progression_hypergraph(
    trajectory_defs: Sequence[Sequence[str]],
    marker_names: Sequence[str] | None = None,
) -> ProgressionHypergraph:
    """Build and validate the static hypergraph from named trajectories.

    ``marker_names`` fixes the marker universe and index order; when omitted
    the universe is the union of trajectory markers in first-appearance
    order. Raises UnknownMarkerName, DuplicateMarkerInTrajectory, or
    CycleDetected when validation fails.
    """
    if marker_names is None:
        seen: dict[str, None] = {}
        for names in trajectory_defs:
            for name in names:
                seen.setdefault(name)
        marker_names = list(seen)
    if len(set(marker_names)) != len(marker_names):
        raise ValueError("marker names must be unique")

    markers = tuple(MarkerId(i, name) for i, name in enumerate(marker_names))
    by_name = {m.name: m for m in markers}

    trajectories = []
    for tid, names in enumerate(trajectory_defs):
        if len(set(names)) != len(names):
            raise DuplicateMarkerInTrajectory(
                f"trajectory {tid} repeats a marker: {list(names)}"
            )
        try:
            ordered = tuple(by_name[name] for name in names)
        except KeyError as exc:
            raise UnknownMarkerName(exc.args[0]) from None
        trajectories.append(Trajectory(tid, ordered))

    # Consecutive-edge union must admit a topological order.
    predecessors: dict[int, set[int]] = {m.index: set() for m in markers}
    for traj in trajectories:
        for prev, nxt in zip(traj.markers, traj.markers[1:]):
            predecessors[nxt.index].add(prev.index)
    try:
        tuple(TopologicalSorter(predecessors).static_order())
    except CycleError as exc:
        raise CycleDetected(f"progression edges contain a cycle: {exc}") from exc

    return ProgressionHypergraph(markers, tuple(trajectories))


def binary_incidence(hg: ProgressionHypergraph) -> np.ndarray:
    """Return the n x m 0/1 incidence matrix (marker belongs to trajectory)."""
    h = np.zeros((hg.n, hg.m), dtype=np.float64)
    for traj in hg.trajectories:
        for marker in traj.markers:
            h[marker.index, traj.id] = 1.0
    return h


def onset_map_from_sequence(
    statuses: Sequence[tuple[Timestamp, Sequence[int]]],
    n: int | None = None,
    strict: bool = False,
) -> OnsetMap:
    """Extract first-onset timestamps from an encounter status sequence.

    ``statuses`` holds (timestamp, status-vector) pairs with strictly
    increasing timestamps. A 1 -> 0 transition raises
    IrreversibilityViolation in strict mode; in lenient mode (default) the
    first onset is kept and the violation counter incremented.
    """
    if not statuses:
        return OnsetMap(tuple([None] * (n or 0)))
    if n is None:
        n = len(statuses[0][1])

    prev_t = None
    onsets: list[OnsetValue] = [None] * n
    violations = 0
    for t, status in statuses:
        if prev_t is not None and t <= prev_t:
            raise NonIncreasingTimestamps(
                f"timestamp {t} does not increase past {prev_t}"
            )
        prev_t = t
        if len(status) != n:
            raise ValueError(f"status vector length {len(status)} != {n}")
        for i, bit in enumerate(status):
            if bit:
                if onsets[i] is None:
                    onsets[i] = float(t)
            elif onsets[i] is not None:
                if strict:
                    raise IrreversibilityViolation(
                        f"marker {i} reverted to 0 at t={t}"
                    )
                violations += 1
    return OnsetMap(tuple(onsets), violations)


def td_snapshot(
    hg: ProgressionHypergraph, onsets: OnsetMap, t: Timestamp
) -> TDHypergraph:
    """Restrict an onset map to what is visible at time ``t``.

    Each hyperedge keeps its longest prefix of positions whose onsets are
    observed by ``t`` in nondecreasing trajectory order; everything else is
    unobserved. Markers observed by ``t`` that fall outside their prefix are
    tallied as out-of-order events, never an error.
    """
    if t < 0:
        raise ValueError("snapshot time must be nonnegative")
    hyperedges = []
    out_of_order = 0
    for traj in hg.trajectories:
        entries: list[OnsetValue] = []
        k0 = 0
        prev: Optional[float] = None
        extending = True
        for marker in traj.markers:
            onset = onsets[marker.index]
            visible = onset is not None and onset <= t
            if extending and visible and (prev is None or onset >= prev):
                entries.append(onset)
                prev = onset
                k0 += 1
            else:
                extending = False
                entries.append(None)
                if visible:
                    out_of_order += 1
        hyperedges.append(TDHyperedge(traj, tuple(entries), k0))
    return TDHypergraph(hg, tuple(hyperedges), t, out_of_order)


def split_frontier(
    e: TDHyperedge,
) -> tuple[tuple[MarkerId, ...], int, tuple[MarkerId, ...]]:
    """Split a TD-hyperedge into (past markers, frontier index, potential markers)."""
    k0 = e.frontier
    return e.trajectory.markers[:k0], k0, e.trajectory.markers[k0:]
