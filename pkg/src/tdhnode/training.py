"""Training loop, masked BCE loss, checkpointing, and resume support.

Training follows the auto-regressive per-patient procedure: roll the model
across each patient's encounters (teacher-forced snapshots), accumulate the
masked onset-prediction BCE over the sequence, and apply one decoupled-decay
Adam update per patient. Early stopping watches the validation loss.

Checkpoints are little-endian binary: magic ``TDHN``, a format version, a
canonical JSON header (configs, pathway definitions and hash, RNG state),
then length-prefixed named tensors. Files round-trip bitwise.
"""

from __future__ import annotations

import json
import logging
import struct
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np
import torch
from torch import Tensor

from .data import PatientSequence, onset_labels
from .errors import (
    ConfigInvalid,
    CorruptFile,
    EmptyCohort,
    NonFiniteLoss,
    PathwayHashMismatch,
    ShapeMismatch,
    VersionMismatch,
)
from .hypergraph import ProgressionHypergraph
from .model import ModelConfig, ProgressionModel, build_model
from .pathways import PathwaySet

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TDHN"
CHECKPOINT_VERSION = 1
PROB_EPS = 1e-7

_DTYPE_CODES = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
    torch.uint8: 3,
    torch.bool: 4,
    torch.int8: 5,
    torch.int32: 6,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 1
    max_epochs: int = 200
    early_stop_patience: int = 5
    dim: int = 128
    attention_heads: int = 8
    attention_layers: int = 2
    ff_expansion: int = 4
    dropout: float = 0.1
    rk4_steps: int = 10
    seed: int = 0
    grad_clip: float = 5.0

    def validate(self) -> None:
        positive = (
            self.learning_rate, self.batch_size, self.max_epochs,
            self.early_stop_patience, self.dim, self.attention_heads,
            self.ff_expansion, self.rk4_steps,
        )
        if any(v <= 0 for v in positive) or self.weight_decay < 0:
            raise ConfigInvalid("training config values must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigInvalid("dropout must be in [0, 1)")

    def model_config(
        self,
        adaptive_incidence: bool = True,
        learnable_weights: bool = True,
    ) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            heads=self.attention_heads,
            context_layers=self.attention_layers,
            ff_expansion=self.ff_expansion,
            dropout=self.dropout,
            rk4_steps=self.rk4_steps,
            adaptive_incidence=adaptive_incidence,
            learnable_weights=learnable_weights,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


def bce_loss(probs: Tensor, targets: Tensor, mask: Tensor) -> Tensor:
    """Mean binary cross-entropy over the masked-in (encounter, marker) pairs."""
    if probs.shape != targets.shape or probs.shape != mask.shape:
        raise ShapeMismatch(
            f"probs {tuple(probs.shape)}, targets {tuple(targets.shape)}, "
            f"mask {tuple(mask.shape)} must agree"
        )
    count = int(mask.sum())
    if count == 0:
        warnings.warn("bce_loss: no masked-in pairs, returning 0")
        return probs.sum() * 0.0
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = targets.to(p.dtype)
    elem = -(y * p.log() + (1.0 - y) * (1.0 - p).log())
    return (elem * mask.to(p.dtype)).sum() / count


def sequence_loss(model: ProgressionModel, seq: PatientSequence) -> Tensor:
    """Rollout one patient and score the onset predictions."""
    out = model.rollout(seq)
    length = seq.valid_length
    targets, mask = onset_labels(seq)
    t = torch.as_tensor(targets[1:length], device=out.probabilities.device)
    m = torch.as_tensor(mask[1:length], device=out.probabilities.device)
    return bce_loss(out.probabilities, t, m)


class EarlyStopper:
    """Stop after ``patience`` epochs without validation improvement."""

    def __init__(self, patience: int, best: float = float("inf"), stall: int = 0):
        self.patience = patience
        self.best = best
        self.stall = stall

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.stall = 0
            return True
        self.stall += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stall >= self.patience


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_recall: float
    val_f1: float
    seconds: float


@dataclass
class TrainResult:
    model: ProgressionModel
    history: list[EpochStats]
    best_epoch: int
    best_val: float
    stopped_early: bool


LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_recall", "val_f1", "seconds")


def _write_log(path, history: Sequence[EpochStats]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in history:
            fh.write(
                f"{row.epoch},{row.train_loss!r},{row.val_loss!r},"
                f"{row.val_recall!r},{row.val_f1!r},{row.seconds:.3f}\n"
            )


def train(
    train_seqs: Sequence[PatientSequence],
    val_seqs: Sequence[PatientSequence],
    hg: ProgressionHypergraph,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    pathway_set: PathwaySet | None = None,
    feature_columns: Sequence[str] | None = None,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    resume_from: str | Path | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Run the full training procedure and return the best-validation model.

    ``stop_after_epoch`` ends the run early and writes a resumable checkpoint
    (parameters, optimizer moments, RNG state, progress counters) to
    ``checkpoint_path``; passing that file as ``resume_from`` replays the
    remaining epochs exactly as an uninterrupted run with the same seed.
    """
    from .metrics import evaluate, cohort_loss  # local import, avoids cycle
    from .errors import EmptyEvaluationSet

    if not train_seqs:
        raise EmptyCohort("training cohort is empty")
    if not val_seqs:
        raise EmptyCohort("validation cohort is empty")
    cfg.validate()
    if model_cfg is None:
        model_cfg = cfg.model_config()
    if pathway_set is None:
        pathway_set = PathwaySet(
            "ad-hoc",
            hg.marker_names,
            tuple(tuple(m.name for m in t.markers) for t in hg.trajectories),
        )

    n_risk = train_seqs[0].risks.shape[1]
    model = build_model(hg, n_risk, model_cfg, seed=cfg.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )

    stopper = EarlyStopper(cfg.early_stop_patience)
    history: list[EpochStats] = []
    best_epoch = 0
    best_state = None
    start_epoch = 1
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_pathway_hash=pathway_set.content_hash())
        model.load_state_dict(_strip_prefix(ckpt.tensors, ""), strict=True)
        _restore_optimizer(optimizer, model, ckpt.tensors)
        meta = ckpt.header["meta"]
        start_epoch = int(meta["epoch"]) + 1
        best_epoch = int(meta["best_epoch"])
        stopper = EarlyStopper(
            cfg.early_stop_patience, best=float(meta["best_val"]),
            stall=int(meta["stall"]),
        )
        history = [EpochStats(**row) for row in meta["history"]]
        best_state = {
            name[len("best."):]: t
            for name, t in ckpt.tensors.items() if name.startswith("best.")
        } or None
        torch.set_rng_state(_bytes_to_rng(bytes.fromhex(ckpt.header["rng_hex"])))

    clip_events = 0
    stopped_early = False
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        tic = time.perf_counter()
        model.train()
        total = 0.0
        optimizer.zero_grad()
        since_step = 0
        for seq in train_seqs:
            loss = sequence_loss(model, seq)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}, patient {seq.patient_id}")
            loss.backward()
            since_step += 1
            if since_step >= cfg.batch_size:
                norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                if norm > cfg.grad_clip:
                    clip_events += 1
                optimizer.step()
                optimizer.zero_grad()
                since_step = 0
            total += float(loss.detach())
        if since_step:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            optimizer.zero_grad()

        model.eval()
        val_loss = cohort_loss(model, val_seqs)
        try:
            report = evaluate(model, val_seqs)
            val_recall, val_f1 = report.recall, report.f1
        except EmptyEvaluationSet:  # degenerate validation sets still get a loss
            val_recall = val_f1 = float("nan")
        seconds = time.perf_counter() - tic
        stats = EpochStats(
            epoch, total / len(train_seqs), val_loss, val_recall, val_f1, seconds
        )
        history.append(stats)
        log.info(
            "epoch %d train %.5f val %.5f recall %.3f f1 %.3f (%.1fs)",
            epoch, stats.train_loss, stats.val_loss, val_recall, val_f1, seconds,
        )

        if stopper.update(val_loss):
            best_epoch = epoch
            best_state = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }
        if log_path is not None:
            _write_log(log_path, history)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            if checkpoint_path is not None:
                _save_resume(
                    checkpoint_path, model, optimizer, cfg, model_cfg,
                    pathway_set, feature_columns, epoch, best_epoch, stopper,
                    history, best_state,
                )
            break
        if stopper.should_stop:
            stopped_early = True
            break

    if clip_events:
        log.info("gradient norm clipped on %d updates", clip_events)
    if best_state is not None:
        model.load_state_dict(best_state)
    if checkpoint_path is not None and stop_after_epoch is None:
        save_checkpoint(
            checkpoint_path, model, cfg, model_cfg, pathway_set, feature_columns,
            meta={"best_epoch": best_epoch, "best_val": stopper.best},
        )
    return TrainResult(model, history, best_epoch, stopper.best, stopped_early)


# --- checkpoint serialization ---------------------------------------------


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, Tensor]

    @property
    def pathway_set(self) -> PathwaySet:
        return PathwaySet.from_dict(self.header["pathways"])


def _tensor_payload(tensor: Tensor) -> tuple[int, tuple[int, ...], bytes]:
    data = tensor.detach().cpu().contiguous()
    code = _DTYPE_CODES[data.dtype]
    arr = data.numpy()
    if arr.dtype.itemsize > 1:
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return code, tuple(arr.shape), arr.tobytes()


def _write_tensor(fh: BinaryIO, name: str, tensor: Tensor) -> None:
    code, shape, payload = _tensor_payload(tensor)
    encoded = name.encode()
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BI", code, len(shape)))
    for s in shape:
        fh.write(struct.pack("<I", s))
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _read_exact(fh: BinaryIO, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CorruptFile(f"unexpected end of file (wanted {count} bytes)")
    return data


def _read_tensor(fh: BinaryIO) -> tuple[str, Tensor]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode()
    code, ndim = struct.unpack("<BI", _read_exact(fh, 5))
    if code not in _CODE_DTYPES:
        raise CorruptFile(f"unknown dtype code {code}")
    shape = tuple(
        struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim)
    )
    (payload_len,) = struct.unpack("<Q", _read_exact(fh, 8))
    payload = _read_exact(fh, payload_len)
    dtype = _CODE_DTYPES[code]
    np_dtype = np.dtype(
        {
            torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8",
            torch.uint8: "u1", torch.bool: "?", torch.int8: "i1",
            torch.int32: "<i4",
        }[dtype]
    )
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape)
    return name, torch.from_numpy(arr.copy()).to(dtype)


def _rng_to_bytes(state: Tensor) -> bytes:
    return state.numpy().tobytes()


def _bytes_to_rng(data: bytes) -> Tensor:
    return torch.tensor(list(data), dtype=torch.uint8)


def _write_checkpoint_file(path, header: dict, tensors: dict[str, Tensor]) -> None:
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])


def save_checkpoint(
    path: str | Path,
    model: ProgressionModel,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    pathway_set: PathwaySet,
    feature_columns: Sequence[str] | None = None,
    extra_tensors: dict[str, Tensor] | None = None,
    meta: dict | None = None,
) -> None:
    header = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "n_risk": model.n_risk,
        "feature_columns": list(feature_columns) if feature_columns else None,
        "pathways": pathway_set.to_dict(),
        "pathway_hash": pathway_set.content_hash(),
        "rng_hex": _rng_to_bytes(torch.get_rng_state()).hex(),
        "meta": meta or {},
    }
    tensors = dict(model.state_dict())
    if extra_tensors:
        tensors.update(extra_tensors)
    _write_checkpoint_file(path, header, tensors)


def _save_resume(
    path, model, optimizer, train_cfg, model_cfg, pathway_set, feature_columns,
    epoch, best_epoch, stopper, history, best_state,
) -> None:
    extra: dict[str, Tensor] = {}
    for name, param in model.named_parameters():
        state = optimizer.state.get(param)
        if state:
            extra[f"optim.{name}.step"] = torch.as_tensor(state["step"])
            extra[f"optim.{name}.exp_avg"] = state["exp_avg"]
            extra[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"]
    if best_state:
        extra.update({f"best.{k}": v for k, v in best_state.items()})
    meta = {
        "epoch": epoch,
        "best_epoch": best_epoch,
        "best_val": stopper.best,
        "stall": stopper.stall,
        "history": [asdict(row) for row in history],
    }
    save_checkpoint(
        path, model, train_cfg, model_cfg, pathway_set, feature_columns,
        extra_tensors=extra, meta=meta,
    )


def _strip_prefix(tensors: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    skip = ("optim.", "best.")
    return {
        name: t for name, t in tensors.items()
        if name.startswith(prefix) and not name.startswith(skip)
    }


def _restore_optimizer(optimizer, model, tensors: dict[str, Tensor]) -> None:
    for name, param in model.named_parameters():
        key = f"optim.{name}.step"
        if key in tensors:
            optimizer.state[param] = {
                "step": tensors[key].to(torch.float32),
                "exp_avg": tensors[f"optim.{name}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"optim.{name}.exp_avg_sq"].clone(),
            }


def load_checkpoint(
    path: str | Path, expected_pathway_hash: str | None = None
) -> Checkpoint:
    """Parse a checkpoint file; verifies magic, version, and pathway hash."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CorruptFile(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise VersionMismatch(
                f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, header_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptFile(f"invalid header: {exc}") from None
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = dict(_read_tensor(fh) for _ in range(n_tensors))
    if expected_pathway_hash is not None:
        if header.get("pathway_hash") != expected_pathway_hash:
            raise PathwayHashMismatch(
                "checkpoint was trained against a different pathway file"
            )
    return Checkpoint(header, tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> ProgressionModel:
    """Rebuild the model (architecture + parameters) from a checkpoint."""
    pathway_set = ckpt.pathway_set
    hg = pathway_set.build()
    model_cfg = ModelConfig.from_dict(ckpt.header["model"])
    model = ProgressionModel(hg, int(ckpt.header["n_risk"]), model_cfg)
    model.load_state_dict(_strip_prefix(ckpt.tensors, ""), strict=True)
    model.eval()
    return model
