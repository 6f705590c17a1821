"""Cohort files, ingestion, onset labels, and the synthetic cohort generator.

A cohort file is line-delimited JSON, one patient per line::

    {"patient_id": "p0", "meta": {...},
     "encounters": [{"t": 0.0, "x": {"GFR": 95.0, "sig0": null}, "y": ["Obesity"]}, ...]}

Risk-factor fields are named; ``null`` marks a missing value. The marker
status vector is given as the array of marker names present at the
encounter. Ingestion applies last-observation-carried-forward imputation,
discretizes configured continuous fields into one-hot categories, repairs
irreversibility violations (lenient mode), and shapes every patient into a
fixed 20-slot sequence (latest 20 encounters kept, shorter sequences padded
at the end).
"""

from __future__ import annotations

import bisect
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ConfigInvalid,
    DimensionMismatch,
    IrreversibilityViolation,
    MalformedRecord,
    NonIncreasingTimestamps,
    UnknownMarkerName,
)
from .hypergraph import OnsetMap, ProgressionHypergraph, onset_map_from_sequence
from .pathways import resolve_pathways

log = logging.getLogger(__name__)

SEQ_LEN = 20  # fixed encounter-sequence length after shaping


@dataclass(frozen=True)
class DiscretizationRule:
    """Bucket a continuous field into named categories by ordered thresholds.

    ``categories[k]`` covers values in [thresholds[k-1], thresholds[k]) with
    open ends; ``default_category`` fills leading-missing values.
    """

    field: str
    thresholds: tuple[float, ...]
    categories: tuple[str, ...]
    default_category: str

    def __post_init__(self):
        if list(self.thresholds) != sorted(set(self.thresholds)):
            raise ConfigInvalid(f"thresholds for {self.field} must strictly increase")
        if len(self.categories) != len(self.thresholds) + 1:
            raise ConfigInvalid(
                f"{self.field}: need {len(self.thresholds) + 1} categories"
            )
        if self.default_category not in self.categories:
            raise ConfigInvalid(f"{self.field}: unknown default category")

    def categorize(self, value: float) -> str:
        return self.categories[bisect.bisect_right(self.thresholds, value)]


DEFAULT_RULES: tuple[DiscretizationRule, ...] = (
    DiscretizationRule(
        "GFR", (60.0, 90.0),
        ("GFR_Decrease_Severe", "GFR_Decrease_Slight", "GFR_NORM"),
        "GFR_NORM",
    ),
    DiscretizationRule(
        "HDL", (40.0, 60.0),
        ("HDL_Bad", "HDL_Normal", "HDL_Good"),
        "HDL_Normal",
    ),
    DiscretizationRule(
        "Triglycerides", (150.0, 199.0),
        ("Triglycerides_Good", "Triglycerides_LowRisk", "Triglycerides_HighRisk"),
        "Triglycerides_Good",
    ),
)


@dataclass(frozen=True)
class FeatureLayout:
    """Ordered risk-feature columns produced by ingestion."""

    columns: tuple[str, ...]

    @property
    def width(self) -> int:
        return len(self.columns)

    def index_of(self, columns: Sequence[str]) -> list[int]:
        pos = {name: i for i, name in enumerate(self.columns)}
        missing = [c for c in columns if c not in pos]
        if missing:
            raise DimensionMismatch(f"cohort lacks risk columns {missing}")
        return [pos[c] for c in columns]


@dataclass
class PatientSequence:
    """Fixed-length encounter sequence with padding masks.

    Arrays all have SEQ_LEN rows; only the first ``valid_length`` are real.
    Padding slots repeat the last timestamp and status with zeroed risks.
    """

    patient_id: str
    times: np.ndarray          # (SEQ_LEN,) float64, months
    risks: np.ndarray          # (SEQ_LEN, c) float32
    statuses: np.ndarray       # (SEQ_LEN, n) int8, monotone per marker
    valid_length: int
    meta: dict = field(default_factory=dict)
    leading_imputed: int = 0   # leading-missing values filled with defaults
    repairs: int = 0           # irreversibility violations repaired

    @property
    def valid_mask(self) -> np.ndarray:
        return np.arange(SEQ_LEN) < self.valid_length

    def onset_map(self) -> OnsetMap:
        """First-onset timestamps over the valid prefix (lenient mode)."""
        k = self.valid_length
        pairs = [(float(self.times[i]), self.statuses[i]) for i in range(k)]
        return onset_map_from_sequence(pairs, n=self.statuses.shape[1])


@dataclass
class IngestResult:
    sequences: list[PatientSequence]
    layout: FeatureLayout

    def align(self, columns: Sequence[str]) -> "IngestResult":
        """Reorder risk columns to match ``columns`` (e.g. from a checkpoint)."""
        idx = self.layout.index_of(columns)
        seqs = [replace(s, risks=s.risks[:, idx].copy()) for s in self.sequences]
        return IngestResult(seqs, FeatureLayout(tuple(columns)))


def _parse_record(line_no: int, line: str) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(line_no, f"invalid JSON: {exc}") from None
    if not isinstance(record, dict) or "patient_id" not in record:
        raise MalformedRecord(line_no, "record must be an object with patient_id")
    encounters = record.get("encounters")
    if not isinstance(encounters, list) or not encounters:
        raise MalformedRecord(line_no, "record needs a non-empty encounters array")
    for enc in encounters:
        if not isinstance(enc, dict) or "t" not in enc:
            raise MalformedRecord(line_no, "encounter needs a timestamp t")
    return record


def read_cohort(path: str | Path) -> list[dict]:
    """Parse a cohort file into raw patient records."""
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            records.append(_parse_record(line_no, line))
    return records


def ingest(
    path: str | Path,
    hg: ProgressionHypergraph,
    rules: Sequence[DiscretizationRule] = DEFAULT_RULES,
    strict: bool = False,
) -> IngestResult:
    """Load, impute, discretize, and shape a cohort file.

    Raises MalformedRecord for unparseable lines, NonIncreasingTimestamps
    when a patient's encounter times do not strictly increase, and
    IrreversibilityViolation in strict mode when a marker reverts to 0.
    """
    records = read_cohort(path)
    rule_by_field = {r.field: r for r in rules}
    marker_index = {m.name: m.index for m in hg.markers}

    field_names: set[str] = set()
    for record in records:
        for enc in record["encounters"]:
            field_names.update((enc.get("x") or {}).keys())
    columns: list[str] = []
    source_fields = sorted(field_names)
    for name in source_fields:
        rule = rule_by_field.get(name)
        columns.extend(rule.categories if rule else (name,))
    columns.sort()  # order independent of whether fields arrive raw or one-hot
    layout = FeatureLayout(tuple(columns))
    col_pos = {name: i for i, name in enumerate(columns)}

    sequences = []
    for record in records:
        pid = str(record["patient_id"])
        encounters = record["encounters"]
        times_raw = [float(enc["t"]) for enc in encounters]
        for prev, cur in zip(times_raw, times_raw[1:]):
            if cur <= prev:
                raise NonIncreasingTimestamps(f"patient {pid}: {cur} after {prev}")

        # LOCF over the full history, then keep the latest SEQ_LEN encounters.
        carried: dict[str, float] = {}
        imputed_rows = []
        leading = 0
        for enc in encounters:
            x = enc.get("x") or {}
            row: dict[str, float] = {}
            for name in source_fields:
                value = x.get(name)
                if value is not None:
                    carried[name] = float(value)
                if name in carried:
                    row[name] = carried[name]
                else:
                    rule = rule_by_field.get(name)
                    row[name] = None if rule else 0.0  # resolved below
                    leading += 1
            imputed_rows.append(row)

        keep = slice(max(0, len(encounters) - SEQ_LEN), len(encounters))
        encounters = encounters[keep]
        imputed_rows = imputed_rows[keep]
        times_kept = times_raw[keep]
        k = len(encounters)

        risks = np.zeros((SEQ_LEN, layout.width), dtype=np.float32)
        statuses = np.zeros((SEQ_LEN, hg.n), dtype=np.int8)
        times = np.zeros(SEQ_LEN, dtype=np.float64)
        repairs = 0
        for i, (enc, row) in enumerate(zip(encounters, imputed_rows)):
            times[i] = times_kept[i]
            for name, value in row.items():
                rule = rule_by_field.get(name)
                if rule:
                    category = (
                        rule.default_category if value is None
                        else rule.categorize(value)
                    )
                    risks[i, col_pos[category]] = 1.0
                else:
                    risks[i, col_pos[name]] = 0.0 if value is None else value
            for name in enc.get("y") or []:
                if name not in marker_index:
                    raise MalformedRecord(0, f"patient {pid}: unknown marker {name!r}")
                statuses[i, marker_index[name]] = 1
            if i > 0:
                reverted = (statuses[i - 1] == 1) & (statuses[i] == 0)
                if reverted.any():
                    if strict:
                        raise IrreversibilityViolation(
                            f"patient {pid}: marker reverted at t={times[i]}"
                        )
                    repairs += int(reverted.sum())
                    statuses[i] |= statuses[i - 1]

        times[k:] = times[k - 1]
        statuses[k:] = statuses[k - 1]
        sequences.append(
            PatientSequence(
                patient_id=pid,
                times=times,
                risks=risks,
                statuses=statuses,
                valid_length=k,
                meta=dict(record.get("meta") or {}),
                leading_imputed=leading,
                repairs=repairs,
            )
        )
    total_repairs = sum(s.repairs for s in sequences)
    if total_repairs:
        log.warning("repaired %d irreversibility violations", total_repairs)
    return IngestResult(sequences, layout)


def write_cohort(
    result: IngestResult,
    hg: ProgressionHypergraph,
    path: str | Path,
) -> None:
    """Write processed sequences back out in the cohort file format."""
    names = hg.marker_names
    with open(path, "w") as fh:
        for seq in result.sequences:
            encounters = []
            for i in range(seq.valid_length):
                x = {c: float(seq.risks[i, j]) for j, c in enumerate(result.layout.columns)}
                y = [names[j] for j in range(hg.n) if seq.statuses[i, j]]
                encounters.append({"t": float(seq.times[i]), "x": x, "y": y})
            record = {"patient_id": seq.patient_id, "meta": seq.meta,
                      "encounters": encounters}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def onset_labels(seq: PatientSequence) -> tuple[np.ndarray, np.ndarray]:
    """Targets and evaluation mask for next-encounter onset prediction.

    Slot k holds the prediction made for encounter k (from the state at
    encounter k-1). target[k, i] is 1 exactly when marker i first onsets at
    encounter k; mask[k, i] admits the pair only while marker i has not yet
    onset before k, and never on slot 0 or padded slots.
    """
    k = seq.valid_length
    n = seq.statuses.shape[1]
    active = seq.statuses[:k].astype(bool)
    first = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        hits = np.flatnonzero(active[:, i])
        if hits.size:
            first[i] = hits[0]

    targets = np.zeros((SEQ_LEN, n), dtype=np.int8)
    mask = np.zeros((SEQ_LEN, n), dtype=bool)
    for step in range(1, k):
        not_yet = (first == -1) | (first >= step)
        mask[step] = not_yet
        targets[step] = not_yet & (first == step)
    return targets, mask


# --- synthetic cohort generation ---------------------------------------------


@dataclass(frozen=True)
class ClusterSpec:
    name: str
    proportion: float
    rate_multiplier: float


@dataclass
class GeneratorConfig:
    """Synthetic cohort with planted heterogeneous progression.

    Marker onsets follow exponential per-transition hazards along trajectory
    order, scaled by a per-cluster rate multiplier; encounter times follow a
    renewal process with exponential gaps. A shared marker onsets once, at
    its earliest trajectory-eligible time.
    """

    n_patients: int
    pathways: str = "diabetes"
    seed: int = 0
    clusters: tuple[ClusterSpec, ...] = (ClusterSpec("baseline", 1.0, 1.0),)
    encounter_gap_mean: float = 1.0
    encounters_min: int = 10
    encounters_max: int = 20
    hazard: float = 0.25
    root_hazard: float | None = None
    n_signal: int = 2
    n_noise: int = 4
    signal_strength: float = 0.5
    noise_sd: float = 1.0
    missing_rate: float = 0.0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ConfigInvalid("n_patients must be positive")
        props = [c.proportion for c in self.clusters]
        if abs(sum(props) - 1.0) > 1e-9 or any(p < 0 for p in props):
            raise ConfigInvalid("cluster proportions must be >= 0 and sum to 1")
        if any(c.rate_multiplier < 0 for c in self.clusters):
            raise ConfigInvalid("rate multipliers must be >= 0")
        if self.hazard < 0 or (self.root_hazard or 0) < 0:
            raise ConfigInvalid("hazards must be >= 0")
        if self.encounter_gap_mean <= 0:
            raise ConfigInvalid("encounter_gap_mean must be positive")
        if not 1 <= self.encounters_min <= self.encounters_max:
            raise ConfigInvalid("need 1 <= encounters_min <= encounters_max")
        if not 0 <= self.missing_rate < 1:
            raise ConfigInvalid("missing_rate must be in [0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        data = dict(data)
        clusters = data.pop("clusters", None)
        cfg = cls(**data)
        if clusters:
            cfg.clusters = tuple(
                ClusterSpec(c["name"], float(c["proportion"]),
                            float(c["rate_multiplier"]))
                for c in clusters
            )
        return cfg


def _sample_onsets(
    hg: ProgressionHypergraph,
    rng: np.random.Generator,
    hazard: float,
    root_hazard: float,
    multiplier: float,
) -> np.ndarray:
    """Per-marker onset times (inf when never), trajectory order exact.

    A marker becomes eligible once every trajectory predecessor it has is
    onset (so its onset can never precede any predecessor's); it then fires
    after the smallest sampled per-transition delay among its containing
    trajectories. Markers outside every trajectory never onset here.
    """

    def delay(rate: float) -> float:
        scaled = rate * multiplier
        return rng.exponential(1.0 / scaled) if scaled > 0 else np.inf

    delays = [
        [delay(root_hazard if pos == 0 else hazard) for pos in range(len(traj))]
        for traj in hg.trajectories
    ]
    containing: dict[int, list[tuple[int, int]]] = {}
    predecessors: dict[int, set[int]] = {m.index: set() for m in hg.markers}
    for traj in hg.trajectories:
        for pos, marker in enumerate(traj.markers):
            containing.setdefault(marker.index, []).append((traj.id, pos))
            if pos:
                predecessors[marker.index].add(traj.markers[pos - 1].index)

    from graphlib import TopologicalSorter

    onsets = np.full(hg.n, np.inf)
    for idx in TopologicalSorter(predecessors).static_order():
        slots = containing.get(idx)
        if not slots:
            continue  # isolated marker: no pathway drives it
        preds = predecessors[idx]
        eligible = max((onsets[p] for p in preds), default=0.0)
        if not np.isfinite(eligible):
            continue
        onsets[idx] = eligible + min(delays[j][pos] for j, pos in slots)
    return onsets


def generate_cohort(cfg: GeneratorConfig, out_path: str | Path) -> list[dict]:
    """Write a synthetic cohort file; returns the raw records."""
    cfg.validate()
    pathway_set = resolve_pathways(cfg.pathways)
    hg = pathway_set.build()
    root_hazard = cfg.hazard if cfg.root_hazard is None else cfg.root_hazard
    proportions = [c.proportion for c in cfg.clusters]
    names = hg.marker_names

    records = []
    for u in range(cfg.n_patients):
        rng = np.random.default_rng([cfg.seed, u])
        cluster = cfg.clusters[rng.choice(len(cfg.clusters), p=proportions)]
        n_enc = int(rng.integers(cfg.encounters_min, cfg.encounters_max + 1))
        gaps = rng.exponential(cfg.encounter_gap_mean, size=max(0, n_enc - 1))
        times = np.concatenate([[0.0], np.cumsum(gaps)])
        onsets = _sample_onsets(hg, rng, cfg.hazard, root_hazard,
                                cluster.rate_multiplier)

        encounters = []
        for t in times:
            x: dict[str, Optional[float]] = {}
            for i in range(cfg.n_signal):
                x[f"sig{i}"] = float(
                    cfg.signal_strength * cluster.rate_multiplier
                    + rng.normal(0.0, cfg.noise_sd)
                )
            for i in range(cfg.n_noise):
                x[f"noise{i}"] = float(rng.normal(0.0, cfg.noise_sd))
            if cfg.missing_rate:
                for key in list(x):
                    if rng.random() < cfg.missing_rate:
                        x[key] = None
            present = [names[i] for i in range(hg.n) if onsets[i] <= t]
            encounters.append({"t": float(t), "x": x, "y": present})
        records.append(
            {
                "patient_id": f"p{u:05d}",
                "meta": {"cluster": cluster.name},
                "encounters": encounters,
            }
        )

    with open(out_path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return records


def cohort_stats(records: Iterable[dict], marker_names: Sequence[str]) -> dict:
    """Summary table: encounter counts, time spans, per-marker rates."""
    counts, spans = [], []
    ever = {name: 0 for name in marker_names}
    status_hits = {name: 0 for name in marker_names}
    total_slots = 0
    n_patients = 0
    for record in records:
        n_patients += 1
        encs = record["encounters"]
        counts.append(len(encs))
        spans.append(float(encs[-1]["t"]) - float(encs[0]["t"]))
        seen = set()
        for enc in encs:
            total_slots += 1
            for name in enc.get("y") or []:
                if name in status_hits:
                    status_hits[name] += 1
                    seen.add(name)
        for name in seen:
            ever[name] += 1
    counts_arr = np.array(counts, dtype=np.float64)
    spans_arr = np.array(spans, dtype=np.float64)
    return {
        "patients": n_patients,
        "encounters_min": float(counts_arr.min()),
        "encounters_avg": float(counts_arr.mean()),
        "encounters_max": float(counts_arr.max()),
        "span_min": float(spans_arr.min()),
        "span_avg": float(spans_arr.mean()),
        "span_max": float(spans_arr.max()),
        "prevalence": {
            name: status_hits[name] / total_slots for name in marker_names
        },
        "onset_rate": {
            name: ever[name] / n_patients for name in marker_names
        },
    }


def split_cohort(
    sequences: Sequence[PatientSequence],
    seed: int,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[list[PatientSequence], list[PatientSequence], list[PatientSequence]]:
    """Seeded patient-level split (train, validation, test)."""
    total = sum(ratios)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sequences))
    n_train = int(len(sequences) * ratios[0] / total)
    n_val = int(len(sequences) * ratios[1] / total)
    train = [sequences[i] for i in order[:n_train]]
    val = [sequences[i] for i in order[n_train:n_train + n_val]]
    test = [sequences[i] for i in order[n_train + n_val:]]
    return train, val, test
