from __future__ import annotations

import numpy as np
import pytest

from tdhnode.data import SEQ_LEN, PatientSequence
from tdhnode.hypergraph import build_progression_hypergraph


@pytest.fixture(scope="session")
def demo_hg():
    """Five cardiovascular markers, two overlapping pathways sharing HP."""
    return build_progression_hypergraph(
        [["HP", "AF", "HF"], ["HP", "CD", "S"]],
        marker_names=["HP", "AF", "HF", "CD", "S"],
    )


def make_sequence(
    times, statuses, risks=None, patient_id="u", meta=None
) -> PatientSequence:
    """Shape raw per-encounter arrays into a padded PatientSequence."""
    times = np.asarray(times, dtype=np.float64)
    statuses = np.asarray(statuses, dtype=np.int8)
    k, n = statuses.shape
    if risks is None:
        risks = np.zeros((k, 3), dtype=np.float32)
    risks = np.asarray(risks, dtype=np.float32)

    full_t = np.zeros(SEQ_LEN)
    full_t[:k] = times
    full_t[k:] = times[-1]
    full_s = np.zeros((SEQ_LEN, n), dtype=np.int8)
    full_s[:k] = statuses
    full_s[k:] = statuses[-1]
    full_x = np.zeros((SEQ_LEN, risks.shape[1]), dtype=np.float32)
    full_x[:k] = risks
    return PatientSequence(
        patient_id=patient_id,
        times=full_t,
        risks=full_x,
        statuses=full_s,
        valid_length=k,
        meta=meta or {},
    )


@pytest.fixture
def demo_sequence(demo_hg):
    """Five encounters: HP at t1, CD at t2, AF at t3, S at t4, HF never.

    Marker order is (HP, AF, HF, CD, S); times are months from the first
    encounter.
    """
    times = [0.0, 1.0, 2.5, 4.0, 6.0]
    statuses = np.zeros((5, 5), dtype=np.int8)
    onset_at = {0: 0, 3: 1, 1: 2, 4: 3}  # marker index -> encounter index
    for marker, step in onset_at.items():
        statuses[step:, marker] = 1
    rng = np.random.default_rng(7)
    risks = rng.normal(size=(5, 3)).astype(np.float32)
    return make_sequence(times, statuses, risks)
