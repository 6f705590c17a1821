"""Micro-averaged onset-prediction metrics over masked (encounter, marker) pairs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import PatientSequence, onset_labels
from .errors import EmptyEvaluationSet
from .model import ProgressionModel


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float
    n_pairs: int

    @classmethod
    def from_counts(
        cls, tp: int, fp: int, tn: int, fn: int, threshold: float
    ) -> "MetricsReport":
        total = tp + fp + tn + fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (
            2.0 * precision * recall / (precision + recall)
            if precision + recall
            else 0.0
        )
        accuracy = (tp + tn) / total if total else 0.0
        return cls(accuracy, precision, recall, f1, tp, fp, tn, fn, threshold, total)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "threshold": self.threshold,
            "n_pairs": self.n_pairs,
        }


def metrics_from_pairs(
    probs: np.ndarray, targets: np.ndarray, threshold: float = 0.5
) -> MetricsReport:
    """Binary metrics for flat arrays of probabilities and 0/1 targets."""
    if probs.size == 0:
        raise EmptyEvaluationSet("no (encounter, marker) pairs to score")
    predicted = probs >= threshold
    actual = targets.astype(bool)
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    tn = int(np.sum(~predicted & ~actual))
    return MetricsReport.from_counts(tp, fp, tn, fn, threshold)


def predicted_pairs(
    model: ProgressionModel, sequences: Sequence[PatientSequence]
) -> tuple[np.ndarray, np.ndarray]:
    """Pool masked-in probabilities and targets across a cohort."""
    probs_all, targets_all = [], []
    model.eval()
    with torch.no_grad():
        for seq in sequences:
            length = seq.valid_length
            if length < 2:
                continue
            out = model.rollout(seq)
            targets, mask = onset_labels(seq)
            p = out.probabilities.double().cpu().numpy()  # rows for slots 1..L-1
            m = mask[1:length]
            probs_all.append(p[m])
            targets_all.append(targets[1:length][m])
    if not probs_all:
        return np.zeros(0), np.zeros(0, dtype=np.int8)
    return np.concatenate(probs_all), np.concatenate(targets_all)


def evaluate(
    model: ProgressionModel,
    sequences: Sequence[PatientSequence],
    threshold: float = 0.5,
) -> MetricsReport:
    """Micro-averaged metrics over every masked-in pair in the cohort."""
    probs, targets = predicted_pairs(model, sequences)
    return metrics_from_pairs(probs, targets, threshold)


def cohort_loss(
    model: ProgressionModel, sequences: Sequence[PatientSequence]
) -> float:
    """Mean per-patient masked BCE, evaluation mode, no gradients."""
    from .training import sequence_loss

    model.eval()
    losses = []
    with torch.no_grad():
        for seq in sequences:
            if seq.valid_length < 2:
                continue
            losses.append(float(sequence_loss(model, seq)))
    return float(np.mean(losses)) if losses else float("nan")


def patient_embeddings(
    model: ProgressionModel, sequences: Sequence[PatientSequence]
) -> tuple[list[str], np.ndarray]:
    """Per-patient summary: mean over marker rows of the final hidden state."""
    ids, rows = [], []
    model.eval()
    with torch.no_grad():
        for seq in sequences:
            out = model.rollout(seq)
            ids.append(seq.patient_id)
            rows.append(out.states[-1].mean(dim=0).double().cpu().numpy())
    return ids, np.stack(rows) if rows else np.zeros((0, model.cfg.dim))
