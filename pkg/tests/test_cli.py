from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from tdhnode.cli import main
from tdhnode.training import load_checkpoint


GEN_TOML = """\
n_patients = 24
pathways = "cardiovascular"
seed = 5
encounters_min = 5
encounters_max = 8
encounter_gap_mean = 1.0
hazard = 0.5
n_signal = 1
n_noise = 2

[[clusters]]
name = "slow"
proportion = 0.5
rate_multiplier = 1.0

[[clusters]]
name = "fast"
proportion = 0.5
rate_multiplier = 6.0
"""

TRAIN_TOML = """\
learning_rate = 3e-3
dim = 8
attention_heads = 2
attention_layers = 1
dropout = 0.1
rk4_steps = 2
max_epochs = 2
seed = 3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared generate + train artifacts for the CLI surface tests."""
    root = tmp_path_factory.mktemp("cli")
    gen_cfg = root / "gen.toml"
    gen_cfg.write_text(GEN_TOML)
    cohort = root / "cohort.jsonl"
    assert main(["generate", "--config", str(gen_cfg), "--out", str(cohort)]) == 0

    train_cfg = root / "train.toml"
    train_cfg.write_text(TRAIN_TOML)
    ckpt = root / "model.ckpt"
    assert main([
        "train", "--cohort", str(cohort), "--pathways", "cardiovascular",
        "--config", str(train_cfg), "--out", str(ckpt),
    ]) == 0
    return root, cohort, train_cfg, ckpt


class TestGenerate:
    def test_output_and_manifest(self, workdir):
        root, cohort, _, _ = workdir
        lines = cohort.read_text().strip().splitlines()
        assert len(lines) == 24
        manifest = json.loads((root / "cohort.jsonl.manifest.json").read_text())
        assert manifest["command"] == "generate"
        assert str(cohort) in manifest["outputs"]
        assert manifest["seed"] == 5

    def test_env_seed_override(self, tmp_path, monkeypatch):
        gen_cfg = tmp_path / "gen.toml"
        gen_cfg.write_text(GEN_TOML)
        monkeypatch.setenv("TDHNODE_SEED", "99")
        out = tmp_path / "c.jsonl"
        main(["generate", "--config", str(gen_cfg), "--out", str(out)])
        manifest = json.loads((tmp_path / "c.jsonl.manifest.json").read_text())
        assert manifest["seed"] == 99


class TestTrain:
    def test_checkpoint_log_manifest(self, workdir):
        root, _, _, ckpt = workdir
        assert ckpt.exists()
        log_rows = list(csv.DictReader(open(f"{ckpt}.log.csv")))
        assert len(log_rows) == 2
        assert set(log_rows[0]) == {
            "epoch", "train_loss", "val_loss", "val_recall", "val_f1", "seconds"
        }
        manifest = json.loads((root / "model.ckpt.manifest.json").read_text())
        assert manifest["command"] == "train"
        header = load_checkpoint(ckpt).header
        assert header["pathways"]["name"] == "cardiovascular"
        assert header["feature_columns"] is not None


class TestEvaluate:
    def test_split_metrics_csv(self, workdir, capsys):
        _, cohort, _, ckpt = workdir
        assert main([
            "evaluate", "--ckpt", str(ckpt), "--cohort", str(cohort),
            "--split", "test",
        ]) == 0
        out = capsys.readouterr().out
        rows = list(csv.DictReader(out.splitlines()))
        assert len(rows) == 1
        assert rows[0]["split"] == "test"
        assert 0.0 <= float(rows[0]["accuracy"]) <= 1.0

    def test_threshold_flag(self, workdir, capsys):
        _, cohort, _, ckpt = workdir
        main([
            "evaluate", "--ckpt", str(ckpt), "--cohort", str(cohort),
            "--threshold", "0.0",
        ])
        rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
        assert float(rows[0]["recall"]) == 1.0

    def test_pathway_check(self, workdir):
        _, cohort, _, ckpt = workdir
        from tdhnode.errors import PathwayHashMismatch

        with pytest.raises(PathwayHashMismatch):
            main([
                "evaluate", "--ckpt", str(ckpt), "--cohort", str(cohort),
                "--pathways", "diabetes",
            ])


class TestExportEmbeddings:
    def test_rows_and_width(self, workdir):
        root, cohort, _, ckpt = workdir
        out = root / "emb.csv"
        assert main([
            "export-embeddings", "--ckpt", str(ckpt), "--cohort", str(cohort),
            "--out", str(out),
        ]) == 0
        rows = list(csv.reader(open(out)))
        header, body = rows[0], rows[1:]
        assert len(body) == 24
        assert len(header) == 1 + 8  # patient_id + dim columns
        assert all(len(r) == len(header) for r in body)


class TestInspect:
    def test_dump_invariants(self, workdir):
        root, cohort, _, ckpt = workdir
        out = root / "dump.json"
        assert main([
            "inspect", "--ckpt", str(ckpt), "--cohort", str(cohort),
            "--patient", "p00000", "--encounter", "2", "--out", str(out),
        ]) == 0
        dump = json.loads(out.read_text())
        hp = np.array(dump["incidence"])
        wp = np.array(dump["edge_weights"])
        assert np.abs(wp - wp.T).max() <= 1e-12
        # attention mass per nonempty subset sums to 1
        for j, alpha in enumerate(dump["attention"]):
            alpha = np.array(alpha)
            k0 = dump["frontier"][j]
            if k0:
                assert alpha[:k0].sum() == pytest.approx(1.0, abs=1e-5)
            if k0 < len(alpha):
                assert alpha[k0:].sum() == pytest.approx(1.0, abs=1e-5)
        # sparsity equals binary membership
        from tdhnode.hypergraph import binary_incidence
        from tdhnode.pathways import resolve_pathways

        h = binary_incidence(resolve_pathways("cardiovascular").build())
        assert ((hp > 0) == (h > 0)).all()

    def test_encounter_out_of_range(self, workdir):
        _, cohort, _, ckpt = workdir
        from tdhnode.errors import IndexOutOfRange

        with pytest.raises(IndexOutOfRange):
            main([
                "inspect", "--ckpt", str(ckpt), "--cohort", str(cohort),
                "--patient", "p00000", "--encounter", "99",
            ])


class TestSweep:
    def test_singleton_sweep_matches_direct_evaluation(self, workdir):
        root, cohort, train_cfg, ckpt = workdir
        out = root / "sweep.csv"
        assert main([
            "sweep", "--cohort", str(cohort), "--pathways", "cardiovascular",
            "--config", str(train_cfg), "--axis", "ode_steps", "--values", "2",
            "--out", str(out),
        ]) == 0
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 1
        assert rows[0]["value"] == "2"
        # Same config and seed as the trained checkpoint: identical metrics.
        from tdhnode.cli import _aligned_ingest, _select_split
        from tdhnode.metrics import evaluate as evaluate_model
        from tdhnode.training import model_from_checkpoint

        ckpt_data = load_checkpoint(ckpt)
        model = model_from_checkpoint(ckpt_data)
        result = _aligned_ingest(cohort, ckpt_data)
        test_s = _select_split(result.sequences, "test",
                               int(ckpt_data.header["train"]["seed"]))
        report = evaluate_model(model, test_s)
        assert float(rows[0]["recall"]) == pytest.approx(report.recall)
        assert float(rows[0]["f1"]) == pytest.approx(report.f1)


class TestStats:
    def test_csv_output(self, workdir, capsys):
        _, cohort, _, _ = workdir
        assert main([
            "stats", "--cohort", str(cohort), "--pathways", "cardiovascular",
        ]) == 0
        rows = list(csv.reader(capsys.readouterr().out.splitlines()))
        metrics = {row[0] for row in rows[1:]}
        assert "encounters_avg" in metrics
        assert any(name.startswith("prevalence/") for name in metrics)


class TestAblate:
    def test_grid_rows(self, workdir):
        root, cohort, train_cfg, _ = workdir
        out = root / "ablation.csv"
        assert main([
            "ablate", "--cohort", str(cohort), "--pathways", "cardiovascular",
            "--config", str(train_cfg), "--grid", "full,none", "--out", str(out),
        ]) == 0
        rows = list(csv.DictReader(open(out)))
        assert [r["spec"] for r in rows] == ["full", "none"]
        assert rows[0]["adaptive_incidence"] == "True"
        assert rows[1]["adaptive_incidence"] == "False"
