"""Command-line interface: generate, train, evaluate, ablate, sweep,
export-embeddings, inspect, stats.

Every run that writes an output also writes ``<out>.manifest.json`` recording
the command, the resolved configuration, seeds, and sha256 hashes of input
and output files. The environment variable ``TDHNODE_SEED`` overrides the
configured seed for any command.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    GeneratorConfig,
    IngestResult,
    cohort_stats,
    generate_cohort,
    ingest,
    read_cohort,
    split_cohort,
)
from .errors import DimensionMismatch, IndexOutOfRange
from .hypergraph import td_snapshot
from .metrics import evaluate as evaluate_model
from .metrics import patient_embeddings
from .pathways import resolve_pathways
from .training import TrainConfig, load_checkpoint, model_from_checkpoint, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

ABLATION_GRID = {
    "full": (True, True),
    "-H": (False, True),
    "-W": (True, False),
    "none": (False, False),
}


def _sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _load_toml(path: str | Path | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _apply_env_seed(seed: int) -> int:
    env = os.environ.get("TDHNODE_SEED")
    return int(env) if env else seed


def _write_manifest(out_path, command: str, config: dict, seed: int,
                    inputs: list, outputs: list) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs if p and Path(p).exists()},
        "outputs": {str(p): _sha256(p) for p in outputs if p and Path(p).exists()},
    }
    with open(f"{out_path}.manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _train_config(config: dict) -> tuple[TrainConfig, dict]:
    """Split a config dict into TrainConfig fields and model flags."""
    flags = {
        key: config.pop(key)
        for key in ("adaptive_incidence", "learnable_weights",
                    "edge_degree_from_binary")
        if key in config
    }
    return TrainConfig.from_dict(config), flags


def _aligned_ingest(cohort_path, ckpt) -> IngestResult:
    hg = ckpt.pathway_set.build()
    result = ingest(cohort_path, hg)
    columns = ckpt.header.get("feature_columns")
    if columns:
        result = result.align(columns)
    elif result.layout.width != int(ckpt.header["n_risk"]):
        raise DimensionMismatch(
            f"cohort has {result.layout.width} risk features, checkpoint "
            f"expects {ckpt.header['n_risk']}"
        )
    return result


def _select_split(sequences, split: str, seed: int):
    if split == "all":
        return list(sequences)
    train_s, val_s, test_s = split_cohort(sequences, seed=seed)
    return {"train": train_s, "val": val_s, "test": test_s}[split]


def _write_metrics_csv(fh, rows: list[dict], lead_columns: list[str]) -> None:
    columns = lead_columns + [
        "accuracy", "precision", "recall", "f1",
        "tp", "fp", "tn", "fn", "threshold", "n_pairs",
    ]
    writer = csv.DictWriter(fh, fieldnames=columns)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)


# --- subcommands -----------------------------------------------------------


def cmd_generate(args) -> int:
    config = _load_toml(args.config)
    cfg = GeneratorConfig.from_dict(config)
    cfg.seed = _apply_env_seed(cfg.seed)
    generate_cohort(cfg, args.out)
    _write_manifest(args.out, "generate", config, cfg.seed,
                    inputs=[args.config], outputs=[args.out])
    print(f"wrote {cfg.n_patients} patients to {args.out}")
    return 0


def _run_training(args, adaptive=True, learnable=True, cfg_override=None,
                  checkpoint_path=None, log_path=None):
    pathway_set = resolve_pathways(args.pathways)
    hg = pathway_set.build()
    result = ingest(args.cohort, hg)
    config = _load_toml(args.config)
    cfg, flags = _train_config(config)
    if cfg_override:
        for key, value in cfg_override.items():
            setattr(cfg, key, value)
    cfg.seed = _apply_env_seed(cfg.seed)
    model_cfg = cfg.model_config(
        adaptive_incidence=flags.get("adaptive_incidence", adaptive),
        learnable_weights=flags.get("learnable_weights", learnable),
    )
    model_cfg.edge_degree_from_binary = flags.get("edge_degree_from_binary", False)
    train_s, val_s, test_s = split_cohort(result.sequences, seed=cfg.seed)
    outcome = train(
        train_s, val_s, hg, cfg,
        model_cfg=model_cfg,
        pathway_set=pathway_set,
        feature_columns=result.layout.columns,
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        resume_from=getattr(args, "resume", None),
    )
    return outcome, test_s, cfg, config


def cmd_train(args) -> int:
    log_path = f"{args.out}.log.csv"
    outcome, _, cfg, config = _run_training(
        args, checkpoint_path=args.out, log_path=log_path
    )
    _write_manifest(args.out, "train", config, cfg.seed,
                    inputs=[args.cohort, args.config, args.pathways],
                    outputs=[args.out, log_path])
    print(
        f"best validation loss {outcome.best_val:.5f} at epoch "
        f"{outcome.best_epoch} ({len(outcome.history)} epochs run)"
    )
    return 0


def cmd_evaluate(args) -> int:
    expected = resolve_pathways(args.pathways).content_hash() if args.pathways else None
    ckpt = load_checkpoint(args.ckpt, expected_pathway_hash=expected)
    model = model_from_checkpoint(ckpt)
    result = _aligned_ingest(args.cohort, ckpt)
    seed = int(ckpt.header["train"]["seed"])
    sequences = _select_split(result.sequences, args.split, seed)
    report = evaluate_model(model, sequences, threshold=args.threshold)
    row = {"split": args.split, **report.to_dict()}
    _write_metrics_csv(sys.stdout, [row], ["split"])
    if args.out:
        with open(args.out, "w") as fh:
            _write_metrics_csv(fh, [row], ["split"])
        _write_manifest(args.out, "evaluate", {"threshold": args.threshold},
                        seed, inputs=[args.cohort, args.ckpt], outputs=[args.out])
    return 0


def cmd_ablate(args) -> int:
    labels = [item.strip() for item in args.grid.split(",") if item.strip()]
    unknown = [g for g in labels if g not in ABLATION_GRID]
    if unknown:
        raise SystemExit(f"unknown ablation labels {unknown}; use {list(ABLATION_GRID)}")
    rows = []
    seed = None
    for label in labels:
        adaptive, learnable = ABLATION_GRID[label]
        outcome, test_s, cfg, _ = _run_training(
            args, adaptive=adaptive, learnable=learnable
        )
        seed = cfg.seed
        report = evaluate_model(outcome.model, test_s, threshold=args.threshold)
        rows.append(
            {
                "spec": label,
                "adaptive_incidence": adaptive,
                "learnable_weights": learnable,
                **report.to_dict(),
            }
        )
    with open(args.out, "w") as fh:
        _write_metrics_csv(fh, rows, ["spec", "adaptive_incidence",
                                      "learnable_weights"])
    _write_manifest(args.out, "ablate", {"grid": labels}, seed,
                    inputs=[args.cohort, args.config], outputs=[args.out])
    print(f"wrote {len(rows)} ablation rows to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    values = [int(v) for v in args.values.split(",")]
    field = {"embedding_dim": "dim", "ode_steps": "rk4_steps"}[args.axis]
    rows = []
    seed = None
    for value in values:
        outcome, test_s, cfg, _ = _run_training(args, cfg_override={field: value})
        seed = cfg.seed
        report = evaluate_model(outcome.model, test_s, threshold=args.threshold)
        rows.append({"value": value, "recall": report.recall, "f1": report.f1})
    with open(args.out, "w") as fh:
        writer = csv.DictWriter(fh, fieldnames=["value", "recall", "f1"])
        writer.writeheader()
        writer.writerows(rows)
    _write_manifest(args.out, "sweep", {"axis": args.axis, "values": values},
                    seed, inputs=[args.cohort, args.config], outputs=[args.out])
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def cmd_export_embeddings(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    result = _aligned_ingest(args.cohort, ckpt)
    ids, rows = patient_embeddings(model, result.sequences)
    dim = rows.shape[1] if len(rows) else model.cfg.dim
    with open(args.out, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id"] + [f"e{i}" for i in range(dim)])
        for pid, row in zip(ids, rows):
            writer.writerow([pid] + [repr(float(v)) for v in row])
    _write_manifest(args.out, "export-embeddings", {}, 0,
                    inputs=[args.cohort, args.ckpt], outputs=[args.out])
    print(f"wrote {len(ids)} embeddings to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    result = _aligned_ingest(args.cohort, ckpt)
    by_id = {seq.patient_id: seq for seq in result.sequences}
    if args.patient not in by_id:
        raise SystemExit(f"no patient {args.patient!r} in cohort")
    seq = by_id[args.patient]
    if not 0 <= args.encounter < seq.valid_length:
        raise IndexOutOfRange(
            f"encounter {args.encounter} outside [0, {seq.valid_length})"
        )
    t = float(seq.times[args.encounter])
    snap = td_snapshot(model.hg, seq.onset_map(), t)
    bundle = model.laplacian_at(snap)

    def dump(tensor):
        return np.asarray(tensor.detach().double().cpu()).tolist()

    payload = {
        "patient_id": seq.patient_id,
        "encounter": args.encounter,
        "t": t,
        "frontier": [edge.frontier for edge in snap.hyperedges],
        "attention": None
        if bundle.attention is None
        else [
            dump(bundle.attention[0, j, : len(edge)])
            for j, edge in enumerate(snap.hyperedges)
        ],
        "incidence": dump(bundle.incidence[0]),
        "edge_weights": dump(bundle.edge_weights[0]),
        "node_degree": dump(bundle.node_degree[0]),
        "edge_degree": dump(bundle.edge_degree[0]),
        "laplacian": dump(bundle.laplacian[0]),
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text)
        _write_manifest(args.out, "inspect",
                        {"patient": args.patient, "encounter": args.encounter},
                        0, inputs=[args.cohort, args.ckpt], outputs=[args.out])
    else:
        print(text)
    return 0


def cmd_stats(args) -> int:
    records = read_cohort(args.cohort)
    pathway_set = resolve_pathways(args.pathways)
    stats = cohort_stats(records, pathway_set.marker_names)
    rows = [("patients", stats["patients"])]
    for key in ("encounters_min", "encounters_avg", "encounters_max",
                "span_min", "span_avg", "span_max"):
        rows.append((key, stats[key]))
    for name, value in stats["prevalence"].items():
        rows.append((f"prevalence/{name}", value))
    for name, value in stats["onset_rate"].items():
        rows.append((f"onset_rate/{name}", value))
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["metric", "value"])
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
            _write_manifest(args.out, "stats", {}, 0,
                            inputs=[args.cohort], outputs=[args.out])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdhnode",
        description="Continuous-time disease progression modeling toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic cohort file")
    p.add_argument("--config", required=True, help="generator TOML config")
    p.add_argument("--out", required=True, help="cohort JSONL output path")
    p.set_defaults(func=cmd_generate)

    def add_training_args(p):
        p.add_argument("--cohort", required=True)
        p.add_argument("--pathways", default="diabetes",
                       help="bundled set name or pathway TOML path")
        p.add_argument("--config", default=None, help="training TOML config")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    add_training_args(p)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--resume", default=None, help="resume checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a cohort")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--pathways", default=None,
                   help="optional pathway file to verify against the checkpoint")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--split", choices=["all", "train", "val", "test"],
                   default="all")
    p.add_argument("--out", default=None, help="optional CSV output path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score the ablation grid")
    add_training_args(p)
    p.add_argument("--grid", default="full,-H,-W,none")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="train across one hyperparameter axis")
    add_training_args(p)
    p.add_argument("--axis", choices=["embedding_dim", "ode_steps"],
                   required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings",
                       help="write per-patient final-state embeddings")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("inspect",
                       help="dump H_p, W_p, Laplacian, and attention at one encounter")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--encounter", type=int, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("stats", help="summary statistics for a cohort file")
    p.add_argument("--cohort", required=True)
    p.add_argument("--pathways", default="diabetes")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
