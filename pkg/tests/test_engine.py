from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from gradcheck import static_laplacian_oracle
from tdhnode.engine import (
    Readout,
    SolverConfig,
    backward,
    dynamics,
    rk4_integrate,
)
from tdhnode.errors import NoRecordedForward, NonFiniteState, ShapeMismatch
from tdhnode.hypergraph import binary_incidence


def scalar_decay_error(steps: int) -> float:
    """|RK4 - exp(-1)| for ds/dt = -s, s(0)=1, over [0, 1]."""
    state = torch.ones(1, 1, dtype=torch.float64)
    out = rk4_integrate(state, 0.0, 1.0, lambda t, s: -s, steps)
    return abs(float(out) - math.exp(-1.0))


class TestSolverConfig:
    def test_defaults(self):
        cfg = SolverConfig()
        assert cfg.method == "rk4"
        assert cfg.steps_per_interval == 10

    def test_invalid(self):
        with pytest.raises(ValueError):
            SolverConfig(steps_per_interval=0)
        with pytest.raises(ValueError):
            SolverConfig(method="euler")


class TestDynamics:
    def test_zero_laplacian_freezes_state(self):
        state = torch.randn(4, 3, dtype=torch.float64)
        out = dynamics(0.0, state, torch.randn(3, dtype=torch.float64),
                       torch.zeros(4, 4, dtype=torch.float64),
                       torch.eye(3, dtype=torch.float64))
        assert torch.equal(out, torch.zeros_like(state))

    def test_identity_transform_reduces_to_diffusion(self):
        torch.manual_seed(0)
        state = torch.randn(4, 3, dtype=torch.float64)
        lap = torch.randn(4, 4, dtype=torch.float64)
        out = dynamics(0.0, state, torch.zeros(3, dtype=torch.float64), lap,
                       torch.eye(3, dtype=torch.float64))
        assert torch.allclose(out, -lap @ state, atol=1e-15)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(3)
        n, d = 3, 2
        state = rng.normal(size=(n, d))
        drive = rng.normal(size=d)
        lap = rng.normal(size=(n, n))
        theta = rng.normal(size=(d, d))
        out = dynamics(
            0.0,
            torch.tensor(state), torch.tensor(drive),
            torch.tensor(lap), torch.tensor(theta),
        ).numpy()
        expected = np.zeros((n, d))
        shifted = state + drive[None, :]
        for i in range(n):
            for j in range(d):
                acc = 0.0
                for k in range(n):
                    for l in range(d):
                        acc += lap[i, k] * shifted[k, l] * theta[l, j]
                expected[i, j] = -acc
        assert np.abs(out - expected).max() <= 1e-12

    def test_shape_mismatch(self):
        state = torch.zeros(4, 3)
        with pytest.raises(ShapeMismatch):
            dynamics(0.0, state, torch.zeros(3), torch.zeros(3, 3), torch.eye(3))
        with pytest.raises(ShapeMismatch):
            dynamics(0.0, state, torch.zeros(2), torch.zeros(4, 4), torch.eye(3))


class TestRK4:
    def test_zero_derivative_keeps_state(self):
        state = torch.randn(3, 2, dtype=torch.float64)
        out = rk4_integrate(state, 0.0, 5.0, lambda t, s: torch.zeros_like(s), 7)
        assert torch.allclose(out, state, atol=1e-15)

    def test_scalar_decay_matches_stability_polynomial(self):
        # For y' = -y every 4-stage order-4 RK step multiplies by
        # R(z) = 1 + z + z^2/2 + z^3/6 + z^4/24, so the 10-step error is
        # |R(-0.1)^10 - e^-1| = 3.332e-7 exactly.
        z = -0.1
        r = 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24
        expected = abs(r**10 - math.exp(-1.0))
        assert scalar_decay_error(10) == pytest.approx(expected, abs=1e-12)

    def test_scalar_decay_high_resolution(self):
        assert scalar_decay_error(100) < 1e-10

    def test_halving_step_width_shows_fourth_order(self):
        ratio = scalar_decay_error(10) / scalar_decay_error(20)
        assert 12.0 <= ratio <= 20.0

    def test_empirical_convergence_order(self):
        errors = [scalar_decay_error(s) for s in (5, 10, 20)]
        for e_coarse, e_fine in zip(errors, errors[1:]):
            order = math.log2(e_coarse / e_fine)
            assert 3.5 <= order <= 4.5

    def test_divergence_guard(self):
        state = torch.ones(1, 1, dtype=torch.float64)
        with pytest.raises(NonFiniteState):
            rk4_integrate(state, 0.0, 10.0, lambda t, s: 10.0 * s, 50)

    def test_empty_interval_rejected(self):
        with pytest.raises(ValueError):
            rk4_integrate(torch.zeros(1, 1), 1.0, 1.0, lambda t, s: s, 4)

    def test_diffusion_contracts_norm(self, demo_hg):
        # Static PSD Laplacian, identity transform, no drive.
        lap = torch.tensor(static_laplacian_oracle(binary_incidence(demo_hg)))
        torch.manual_seed(1)
        state = torch.randn(5, 4, dtype=torch.float64)
        norms = [float(state.norm())]
        theta = torch.eye(4, dtype=torch.float64)
        drive = torch.zeros(4, dtype=torch.float64)
        for k in range(5):
            state = rk4_integrate(
                state, float(k), float(k + 1),
                lambda t, s: dynamics(t, s, drive, lap, theta), 10,
            )
            norms.append(float(state.norm()))
        assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))


class TestReadout:
    def test_zero_parameters_give_half(self):
        readout = Readout(8)
        with torch.no_grad():
            for p in readout.parameters():
                p.zero_()
        probs = readout(torch.randn(5, 8))
        assert torch.allclose(probs, torch.full((5,), 0.5))

    def test_open_unit_interval(self):
        torch.manual_seed(0)
        readout = Readout(8)
        probs = readout(torch.randn(100, 8) * 10)
        assert (probs > 0).all() and (probs < 1).all()

    def test_matches_scalar_recomputation(self):
        torch.manual_seed(2)
        readout = Readout(4).double()
        state = torch.randn(3, 4, dtype=torch.float64)
        w = readout.proj.weight.detach().numpy().ravel()
        b = float(readout.proj.bias.detach())
        probs = readout(state).detach().numpy()
        for i in range(3):
            logit = float(state[i].numpy() @ w + b)
            expected = 1.0 / (1.0 + math.exp(-logit))
            assert probs[i] == pytest.approx(expected, abs=1e-12)


class TestBackward:
    def test_requires_recorded_forward(self):
        with pytest.raises(NoRecordedForward):
            backward(torch.tensor(1.0))

    def test_unused_parameter_gets_no_gradient(self):
        used = torch.nn.Parameter(torch.tensor(2.0))
        unused = torch.nn.Parameter(torch.tensor(3.0))
        loss = used ** 2
        backward(loss)
        assert unused.grad is None
        assert used.grad is not None

    def test_loss_scaling_doubles_gradients(self):
        param = torch.nn.Parameter(torch.randn(4, dtype=torch.float64))
        x = torch.randn(4, dtype=torch.float64)

        def grad_of(scale):
            if param.grad is not None:
                param.grad = None
            backward(scale * (param * x).sum() ** 2)
            return param.grad.clone()

        g1 = grad_of(1.0)
        g2 = grad_of(2.0)
        assert torch.allclose(g2, 2.0 * g1, atol=1e-12)
