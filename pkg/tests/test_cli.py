import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from neuralfg import checkpoint
from neuralfg.cli import main, resolve_config


def _run_dirs(out: Path) -> list[Path]:
    return sorted(p for p in out.iterdir() if p.is_dir())


def _only_run(out: Path) -> Path:
    dirs = _run_dirs(out)
    assert len(dirs) == 1
    return dirs[0]


def _error(capsys) -> dict:
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


@pytest.fixture(scope="module")
def small_cohort(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("gen")
    assert main(["generate", "--n", "200", "--p", "4", "--seed", "3", "--out", str(out)]) == 0
    return _only_run(out) / "cohort.csv"


@pytest.fixture(scope="module")
def small_model(tmp_path_factory, small_cohort) -> Path:
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--data", str(small_cohort), "--layers", "1", "--nodes", "25",
                 "--max-epochs", "3", "--out", str(out)]) == 0
    return _only_run(out) / "model.nfg"


class TestGenerate:
    def test_default_contract(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path)]) == 0
        run = _only_run(tmp_path)
        with (run / "cohort.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 30_001
        assert sum(1 for h in rows[0] if h.startswith("x")) == 12
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["run"]["seed"] == 0 and manifest["spec"]["n"] == 30_000

    def test_row_count_flag(self, tmp_path):
        assert main(["generate", "--n", "100", "--out", str(tmp_path)]) == 0
        assert len((_only_run(tmp_path) / "cohort.csv").read_text().splitlines()) == 101

    def test_same_seed_same_files(self, tmp_path):
        for _ in range(2):
            assert main(["generate", "--n", "50", "--seed", "8", "--out", str(tmp_path)]) == 0
        a, b = _run_dirs(tmp_path)
        for name in ("cohort.csv", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestTrainEvaluate:
    def test_train_outputs(self, small_model):
        run = small_model.parent
        result = json.loads((run / "result.json").read_text())
        assert result["outputs"]["model.nfg"] == hashlib.sha256(small_model.read_bytes()).hexdigest()
        assert result["run"]["inputs"]["data"]["sha256"]
        first = json.loads((run / "training_log.jsonl").read_text().splitlines()[0])
        assert first["run"]["command"] == "train"
        assert (run / "training_curve.png").read_bytes()[:4] == b"\x89PNG"
        assert checkpoint.load(small_model).n_features == 4

    def test_evaluate_outputs(self, tmp_path, small_cohort, small_model, capsys):
        assert main(["evaluate", "--data", str(small_cohort), "--checkpoint", str(small_model),
                     "--out", str(tmp_path)]) == 0
        run = _only_run(tmp_path)
        text = (run / "metrics.txt").read_text()
        assert text.startswith("# {") and "C q0.25" in text and "Brier q0.75" in text
        metrics = json.loads((run / "metrics.json").read_text())
        assert set(metrics["report"]["horizons"]) == {"q0.25", "q0.50", "q0.75"}
        assert (run / "cif.png").exists() and (run / "metrics.png").exists()
        assert "q0.50" in capsys.readouterr().out

    def test_fixed_horizons(self, tmp_path, small_cohort, small_model):
        assert main(["evaluate", "--data", str(small_cohort), "--checkpoint", str(small_model),
                     "--horizons", "0.01,0.05", "--out", str(tmp_path)]) == 0
        metrics = json.loads((_only_run(tmp_path) / "metrics.json").read_text())
        assert list(metrics["report"]["horizons"]) == ["t=0.01", "t=0.05"]

    def test_schema_mismatch_names_both_counts(self, tmp_path, small_model, capsys):
        assert main(["generate", "--n", "30", "--p", "6", "--out", str(tmp_path / "g")]) == 0
        data = _only_run(tmp_path / "g") / "cohort.csv"
        capsys.readouterr()
        assert main(["evaluate", "--data", str(data), "--checkpoint", str(small_model),
                     "--out", str(tmp_path)]) == 1
        err = _error(capsys)
        assert err["error"] == "SchemaError" and err["command"] == "evaluate"
        assert "4 features" in err["message"] and "6" in err["message"]


class TestErrors:
    def test_missing_required_option(self, capsys):
        assert main(["train"]) == 1
        err = _error(capsys)
        assert err["error"] == "UsageError" and "data" in err["message"]

    def test_unknown_flag(self, capsys):
        assert main(["generate", "--bogus"]) == 1
        assert _error(capsys)["error"] == "UsageError"

    def test_missing_file(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 1
        assert _error(capsys)["error"] == "FileNotFoundError"

    def test_bad_variant(self, capsys):
        assert main(["train", "--data", "x.csv", "--variant", "cox"]) == 1
        assert "cox" in _error(capsys)["message"]

    def test_version(self, capsys):
        assert main(["--version"]) == 0
        assert capsys.readouterr().out.startswith("neuralfg ")


class TestConfig:
    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"n": 10, "p": 3}))
        cfg = resolve_config("generate", {"config": str(cfg_file), "p": 5})
        assert (cfg["n"], cfg["p"], cfg["censoring"]) == (10, 5, 0.5)

    def test_unknown_key(self, tmp_path, capsys):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"epochs": 10}))
        assert main(["generate", "--config", str(cfg_file), "--out", str(tmp_path)]) == 1
        assert "epochs" in _error(capsys)["message"]

    def test_variant_spelling(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"variant": "cause-specific"}))
        cfg = resolve_config("train", {"config": str(cfg_file), "data": "d.csv"})
        assert cfg["variant"] == "cause_specific"


class TestCv:
    ARGS = ["--k", "2", "--trials", "0", "--layers", "1", "--nodes", "25", "--max-epochs", "2",
            "--seed", "5"]

    def test_byte_identical_reruns(self, tmp_path, small_cohort, capsys):
        for _ in range(2):
            assert main(["cv", "--data", str(small_cohort), *self.ARGS, "--out", str(tmp_path)]) == 0
        a, b = _run_dirs(tmp_path)
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        assert {"fold0.nfg", "fold1.nfg", "metrics.json", "metrics.txt", "metrics.png"} <= set(names)
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
        out = capsys.readouterr().out
        assert "Risk" in out and "C q0.25" in out and "(" in out

    def test_search_records_trials(self, tmp_path, small_cohort):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"grid": {"learning_rate": [1e-3], "batch_size": [100],
                                             "dropout": [0.0], "layers": [1], "nodes": [25]}}))
        assert main(["cv", "--data", str(small_cohort), "--config", str(grid), "--k", "2",
                     "--trials", "2", "--max-epochs", "1", "--out", str(tmp_path / "o")]) == 0
        metrics = json.loads((_only_run(tmp_path / "o") / "metrics.json").read_text())
        assert all(len(f["search"]) == 2 for f in metrics["folds"])


class TestReclassify:
    def test_matrices_and_subgroups(self, tmp_path, small_cohort, small_model):
        assert main(["reclassify", "--data", str(small_cohort), "--checkpoint-a", str(small_model),
                     "--checkpoint-b", str(small_model), "--horizon", "0.02",
                     "--filter-column", "x1", "--filter-min", "-1",
                     "--group-column", "x2", "--group-edges=-1,1", "--out", str(tmp_path)]) == 0
        run = _only_run(tmp_path)
        payload = json.loads((run / "reclassification.json").read_text())
        free, event = payload["matrices"]
        assert free["cohort"] == "x1 >= -1"
        for mat in (free, event):
            counts = np.array(mat["counts"])
            assert counts.sum() == np.trace(counts)
        assert payload["boundary_rule"].startswith("[0,0.1) low")
        assert set(payload["subgroup_brier_diff"]["values"]) == {"<-1", "-1-1", "1+"}
        assert (run / "reclassification.png").exists()


class TestBenchmark:
    def test_three_degree_rows(self, tmp_path):
        assert main(["benchmark", "--degrees", "1,15,100", "--batch-size", "40", "--layers", "1",
                     "--nodes", "8", "--min-samples", "3", "--out", str(tmp_path)]) == 0
        report = json.loads((_only_run(tmp_path) / "benchmark.json").read_text())["report"]
        degrees = [r["degree"] for r in report["rows"] if r["degree"] is not None]
        assert degrees == [1, 15, 100]
