"""Continuous-time latent dynamics and the fixed-step RK4 integrator.

The vector field is ``dS/dt = -L (S + drive) Theta`` with the Laplacian and
the encoded risk drive held constant across each inter-encounter interval.
Gradients flow by differentiating through the unrolled solver steps
(discretize-then-optimize); there is no adjoint path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor, nn

from .errors import NoRecordedForward, NonFiniteState, ShapeMismatch

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class SolverConfig:
    """Fixed-step RK4 configuration."""

    method: str = "rk4"
    steps_per_interval: int = 10

    def __post_init__(self):
        if self.method != "rk4":
            raise ValueError(f"unsupported solver method {self.method!r}")
        if self.steps_per_interval < 1:
            raise ValueError("steps_per_interval must be >= 1")


def dynamics(t: float, state: Tensor, drive: Tensor, laplacian: Tensor,
             transform: Tensor) -> Tensor:
    """Evaluate ``-L (S + drive) Theta`` for an (n, d) state.

    ``drive`` is the encoded risk vector broadcast across all marker rows.
    ``t`` is unused (the field is autonomous within an interval) but kept so
    the signature matches the integrator callback.
    """
    n, d = state.shape[-2], state.shape[-1]
    if laplacian.shape[-2:] != (n, n):
        raise ShapeMismatch(
            f"laplacian {tuple(laplacian.shape)} does not match state rows {n}"
        )
    if drive.shape[-1] != d or transform.shape != (d, d):
        raise ShapeMismatch("drive or transform width does not match state")
    return -(laplacian @ (state + drive.unsqueeze(-2))) @ transform


def rk4_integrate(
    state: Tensor,
    t0: float,
    t1: float,
    deriv: Callable[[float, Tensor], Tensor],
    steps: int,
) -> Tensor:
    """Advance ``state`` from t0 to t1 with ``steps`` equal RK4 substeps.

    Raises NonFiniteState if the state leaves [-1e6, 1e6] or turns NaN/Inf
    at any substep (fail fast on unstable configurations).
    """
    if not t1 > t0:
        raise ValueError(f"integration interval [{t0}, {t1}] is empty")
    h = (t1 - t0) / steps
    for i in range(steps):
        t = t0 + i * h
        k1 = deriv(t, state)
        k2 = deriv(t + h / 2, state + (h / 2) * k1)
        k3 = deriv(t + h / 2, state + (h / 2) * k2)
        k4 = deriv(t + h, state + h * k3)
        state = state + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not torch.isfinite(state).all() or state.abs().max() > DIVERGENCE_LIMIT:
            raise NonFiniteState(
                f"state diverged during step {i + 1}/{steps} of [{t0}, {t1}]"
            )
    return state


class Readout(nn.Module):
    """Shared per-marker linear map from hidden rows to a scalar logit."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, 1)

    def forward(self, state: Tensor) -> Tensor:
        """Marker probabilities: sigmoid of the readout logit per row."""
        return torch.sigmoid(self.proj(state).squeeze(-1))


def backward(loss: Tensor) -> None:
    """Populate gradients for every parameter behind ``loss``."""
    if loss.grad_fn is None:
        raise NoRecordedForward("loss has no recorded computation graph")
    loss.backward()
