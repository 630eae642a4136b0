import json
import subprocess
import sys

import pytest

from hierlearn.cli import main
from hierlearn.hierarchy import loads_composed, loads_tree


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "loads.csv"), "--series", "5", "--days", "20", "--seed", "2"]) == 0
    (root / "cfg.ini").write_text(
        f"[data]\npath = {root / 'loads.csv'}\n[windows]\nn_batches = 2\ntest_size = 24\n[learner]\nepochs = 3\n"
    )
    return root


def test_ingest(workdir, capsys):
    assert main(["ingest", str(workdir / "loads.csv"), "--out", str(workdir / "clean.csv")]) == 0
    assert "kept 5" in capsys.readouterr().out
    assert (workdir / "clean.csv").read_text().startswith("series,timestamp,value")


def test_ingest_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("series,timestamp,value\na,2020-01-01,1\na,2020-01-01,2\n")
    assert main(["ingest", str(bad), "--out", str(tmp_path / "o.csv")]) == 2
    assert "duplicate" in capsys.readouterr().err


def test_tree_subcommands(workdir, capsys):
    spatial, dend = workdir / "spatial.txt", workdir / "dend.txt"
    assert main(["tree", "build", str(workdir / "loads.csv"), "--out", str(spatial), "--dendrogram", str(dend), "--max-leaves", "4"]) == 0
    assert loads_tree(spatial.read_text()).m == 4
    assert main(["tree", "cut", str(dend), "--threshold", "1e9", "--out", str(workdir / "flat.txt")]) == 0
    assert loads_tree((workdir / "flat.txt").read_text()).depth == 2
    temporal = workdir / "day.txt"
    assert main(["tree", "temporal", "--cycle", "24", "--ks", "24,6,3,1", "--out", str(temporal)]) == 0
    assert loads_tree(temporal.read_text()).n == 37
    composed = workdir / "st.txt"
    assert main(["tree", "compose", str(spatial), str(temporal), "--out", str(composed)]) == 0
    a, b, order = loads_composed(composed.read_text())
    assert order == "SoT" and b.n == 37
    assert f"composed shape {a.n * 37} x {a.m * 24}" in capsys.readouterr().err
    assert main(["tree", "prune", str(composed), "--drop", "total|1h_1", "--out", str(workdir / "pruned.txt")]) == 0
    rows = (workdir / "pruned.txt").read_text().splitlines()
    assert len(rows) == a.n * 37 - 1 and "total|1h_1" not in rows


def test_features(workdir):
    out = workdir / "features.json"
    assert main(["features", "--config", str(workdir / "cfg.ini"), "--out", str(out)]) == 0
    assert "lags" in json.loads(out.read_text())


def test_train_reconcile_evaluate(workdir, capsys):
    tdir = workdir / "train"
    assert main(["train", "--config", str(workdir / "cfg.ini"), "--forecaster", "multi-task", "--out", str(tdir)]) == 0
    rec = workdir / "multi-task__hvar.csv"
    args = ["reconcile", "--tree", str(tdir / "tree.txt"), "--forecasts", str(tdir / "forecasts_batch1.csv")]
    args += ["--residuals", str(tdir / "residuals_batch1.csv"), "--method", "hvar", "--out", str(rec)]
    args += ["--sigma-out", str(workdir / "sigma.txt")]
    assert main(args) == 0
    assert (workdir / "sigma.txt").read_text().startswith("n\t")
    raw = workdir / "multi-task__None.csv"
    raw.write_bytes((tdir / "forecasts_batch1.csv").read_bytes())
    capsys.readouterr()
    args = ["evaluate", "--tree", str(tdir / "tree.txt"), "--truth", str(tdir / "truth_batch1.csv"), "--out", str(workdir / "ev")]
    assert main(args + [str(raw), str(rec)]) == 0
    doc = json.loads((workdir / "ev" / "report.json").read_text())
    assert doc["cells"]["multi-task"]["hvar"]["coherency_ms3e"] == 0.0
    assert doc["cells"]["multi-task"]["None"]["coherency_ms3e"] > 0.0


def test_run_exit_codes(workdir):
    ok = ["run", "--config", str(workdir / "cfg.ini"), "--reconcilers", "None,str", "--seed", "5", "--alpha", "0.5"]
    assert main(ok + ["--out", str(workdir / "run")]) == 0
    doc = json.loads((workdir / "run" / "report.json").read_text())
    assert doc["header"]["config"]["experiment"]["seed"] == "5"
    assert doc["header"]["config"]["learner"]["alpha"] == "0.5"
    assert main(ok + ["--forecasters", "base,nope", "--out", str(workdir / "run2")]) == 1


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "hierlearn.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("ingest", "tree", "features", "train", "reconcile", "evaluate", "run"):
        assert cmd in out.stdout
