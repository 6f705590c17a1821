from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from tdhnode.encoders import (
    IndexEncoder,
    InitStateEncoder,
    MarkerEmbedding,
    RiskEncoder,
    TimeEncoder,
)
from tdhnode.errors import DimensionMismatch, IndexOutOfRange


def seeded(module_factory, seed=0):
    torch.manual_seed(seed)
    return module_factory()


class TestMarkerEmbedding:
    def test_shape_default_width(self):
        emb = seeded(lambda: MarkerEmbedding(21, 128))
        assert emb().shape == (21, 128)

    def test_deterministic(self):
        emb = seeded(lambda: MarkerEmbedding(6, 16))
        assert torch.equal(emb(), emb())

    def test_rows_pairwise_distinct_on_seeded_init(self):
        emb = seeded(lambda: MarkerEmbedding(8, 32), seed=3)
        table = emb().detach()
        dists = torch.cdist(table, table)
        off_diag = dists + torch.eye(8) * 1e9
        assert float(off_diag.min()) > 0

    def test_finite(self):
        emb = seeded(lambda: MarkerEmbedding(5, 8))
        assert torch.isfinite(emb()).all()


class TestTimeEncoder:
    def test_zero_time_zero_phase(self):
        enc = TimeEncoder(16)
        with torch.no_grad():
            enc.phase.zero_()
        out = enc(torch.tensor(0.0))
        expected = 1.0 / math.sqrt(16)
        assert torch.allclose(out, torch.full((16,), expected))

    def test_bounded_for_any_time(self):
        enc = seeded(lambda: TimeEncoder(32), seed=1)
        bound = 1.0 / math.sqrt(32) + 1e-7
        for t in [0.0, 0.3, 17.0, 1234.5]:
            assert enc(torch.tensor(t)).abs().max() <= bound

    def test_full_period_frequency(self):
        # First frequency 2*pi: cos(2*pi * 1) recovers 1/sqrt(dim) at t=1.
        enc = TimeEncoder(4)
        with torch.no_grad():
            enc.frequency[0] = 2 * math.pi
            enc.phase.zero_()
        out = enc(torch.tensor(1.0))
        assert out[0].item() == pytest.approx(1 / math.sqrt(4), abs=1e-6)

    def test_exact_periodicity_per_coordinate(self):
        enc = seeded(lambda: TimeEncoder(8), seed=2).to(torch.float64)
        t = torch.tensor(3.7, dtype=torch.float64)
        with torch.no_grad():
            for k in range(8):
                period = 2 * math.pi / float(enc.frequency[k])
                shifted = enc(t + period)
                base = enc(t)
                assert abs(float(shifted[k] - base[k])) <= 1e-12

    def test_batched_shape(self):
        enc = TimeEncoder(8)
        out = enc(torch.zeros(3, 2, 5))
        assert out.shape == (3, 2, 5, 8)


class TestIndexEncoder:
    def test_row_zero_alternates(self):
        enc = IndexEncoder(4, 8)
        row = enc(0)
        assert torch.allclose(row, torch.tensor([0.0, 1.0] * 4))

    def test_rows_pairwise_distinct(self):
        enc = IndexEncoder(4, 16)
        rows = enc.table
        for i in range(5):
            for j in range(i + 1, 5):
                assert not torch.allclose(rows[i], rows[j])

    def test_against_direct_recomputation(self):
        # Standard sinusoid at position 1, dim 4, base 10000.
        enc = IndexEncoder(2, 4)
        expected = [
            math.sin(1.0),
            math.cos(1.0),
            math.sin(1.0 / 100.0),
            math.cos(1.0 / 100.0),
        ]
        assert np.allclose(enc(1).numpy(), expected, atol=1e-6)

    def test_out_of_range(self):
        enc = IndexEncoder(3, 8)
        with pytest.raises(IndexOutOfRange):
            enc(4)
        with pytest.raises(IndexOutOfRange):
            enc(torch.tensor([0, 5]))

    def test_pure_table_identical_across_instances(self):
        assert torch.equal(IndexEncoder(5, 12).table, IndexEncoder(5, 12).table)


class TestRiskEncoder:
    def test_output_width_for_diabetes_risk_set(self):
        enc = seeded(lambda: RiskEncoder(34, 128))
        out = enc(torch.zeros(34))
        assert out.shape == (128,)

    def test_zero_parameters_give_zero_vector(self):
        enc = RiskEncoder(5, 8)
        with torch.no_grad():
            for p in enc.parameters():
                p.zero_()
        assert torch.equal(enc(torch.randn(5)), torch.zeros(8))

    def test_distinct_inputs_distinct_outputs(self):
        enc = seeded(lambda: RiskEncoder(6, 16), seed=4)
        torch.manual_seed(0)
        a, b = torch.randn(6), torch.randn(6)
        assert (enc(a) - enc(b)).norm() > 0

    def test_dimension_mismatch(self):
        enc = RiskEncoder(6, 16)
        with pytest.raises(DimensionMismatch):
            enc(torch.zeros(7))


class TestInitStateEncoder:
    def _inputs(self, n=5, dim=16, seed=0):
        torch.manual_seed(seed)
        markers = torch.randn(n, dim)
        status = torch.zeros(n)
        risk = torch.randn(dim)
        return markers, status, risk

    def test_shape_and_determinism(self):
        enc = seeded(lambda: InitStateEncoder(16))
        markers, status, risk = self._inputs()
        status[0] = 1.0  # HP present at the first encounter
        a = enc(markers, status, risk)
        b = enc(markers, status, risk)
        assert a.shape == (5, 16)
        assert torch.equal(a, b)

    def test_rows_differ_across_markers(self):
        enc = seeded(lambda: InitStateEncoder(16), seed=1)
        markers, status, risk = self._inputs(seed=1)
        status[0] = 1.0
        out = enc(markers, status, risk)
        assert (out[0] - out[1]).norm() > 0

    def test_row_local_status_flip(self):
        enc = seeded(lambda: InitStateEncoder(16), seed=2)
        markers, status, risk = self._inputs(seed=2)
        base = enc(markers, status, risk)
        flipped_status = status.clone()
        flipped_status[2] = 1.0
        flipped = enc(markers, flipped_status, risk)
        assert not torch.allclose(base[2], flipped[2])
        for row in (0, 1, 3, 4):
            assert torch.equal(base[row], flipped[row])

    def test_dimension_mismatch(self):
        enc = InitStateEncoder(16)
        markers, status, risk = self._inputs()
        with pytest.raises(DimensionMismatch):
            enc(markers, status[:-1], risk)
        with pytest.raises(DimensionMismatch):
            enc(markers, status, torch.zeros(8))

    def test_finite(self):
        enc = seeded(lambda: InitStateEncoder(16), seed=3)
        markers, status, risk = self._inputs(seed=3)
        assert torch.isfinite(enc(markers, status, risk)).all()
