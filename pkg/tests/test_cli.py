import csv
import json

import numpy as np
import pytest

from lsplit.cli import main, verify_manifest
from lsplit.datagen import read_csv
from lsplit.errors import ContractError


@pytest.fixture(autouse=True)
def _no_env_out(monkeypatch):
    monkeypatch.delenv("LSPLIT_OUT_DIR", raising=False)


def run(*argv):
    return main([str(a) for a in argv])


def gen_spurious(out, n=2000, seed=0, rho=0.9):
    assert run("gen", "spurious", "--n", n, "--rho", rho, "--seed", seed, "--out", out) == 0
    return out / "dataset.csv"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen -> split -> debias with a validation set and a balanced evaluation set."""
    root = tmp_path_factory.mktemp("pipeline")
    data = gen_spurious(root / "train")
    val = gen_spurious(root / "val", n=1000, seed=1)
    ev = gen_spurious(root / "eval", n=4000, seed=2, rho=0.5)
    assert run("split", "--data", data, "--out", root / "split") == 0
    assert run("debias", "--data", data, "--split", root / "split" / "split.csv",
               "--val-data", val, "--eval-data", ev, "--weight-decays", "0",
               "--out", root / "debias") == 0
    return root


def test_gen_spurious_rows(tmp_path):
    path = gen_spurious(tmp_path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 2001
    assert rows[0][0] == "id" and "label" in rows[0] and "spurious" in rows[0]


def test_gen_noise_count(tmp_path):
    assert run("gen", "blobs", "--n", 60000, "--classes", 10, "--out", tmp_path / "b") == 0
    assert run("gen", "noise", "--data", tmp_path / "b" / "dataset.csv", "--eta", 0.1,
               "--seed", 3, "--out", tmp_path / "n") == 0
    _, truth = read_csv(tmp_path / "n" / "dataset.csv")
    assert abs(truth.polluted.sum() - 6000) <= 300


def test_missing_out_is_usage_error(tmp_path, capsys):
    assert run("gen", "spurious", "--n", 100) == 2
    assert "--out" in capsys.readouterr().err


def test_env_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("LSPLIT_OUT_DIR", str(tmp_path / "env"))
    assert run("gen", "spurious", "--n", 100) == 0
    assert (tmp_path / "env" / "dataset.csv").exists()


def test_bad_config_exit_code(tmp_path):
    data = gen_spurious(tmp_path / "d", n=200)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"delta": 1.5}))
    assert run("split", "--data", data, "--config", cfg, "--out", tmp_path / "s") == 2


def test_missing_data_file(tmp_path):
    assert run("split", "--data", tmp_path / "nope.csv", "--out", tmp_path / "s") == 3


def test_split_is_reproducible(tmp_path):
    data = gen_spurious(tmp_path / "d", n=300)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_outer_iters": 3}))
    for name in ("a", "b"):
        assert run("split", "--data", data, "--config", cfg, "--seed", 4,
                   "--out", tmp_path / name) == 0
    for f in ("split.csv", "trace.jsonl", "splitter.npz"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    manifest = verify_manifest(tmp_path / "a")
    assert manifest["seed"] == 4 and manifest["config"]["max_outer_iters"] == 3
    assert set(manifest["outputs"]) == {"split.csv", "trace.jsonl", "splitter.npz"}


def test_split_outputs_and_gap(pipeline):
    rows = [json.loads(line) for line in (pipeline / "split" / "trace.jsonl").read_text().splitlines()]
    assert rows[-1]["gap_stats"]["gap"] >= 0.30
    with open(pipeline / "split" / "split.csv") as fh:
        split = list(csv.DictReader(fh))
    assert len(split) == 2000
    assert all(0 < float(r["prob"]) < 1 and r["z"] in "01" for r in split)


def test_debias_metrics(pipeline):
    metrics = json.loads((pipeline / "debias" / "metrics.json").read_text())
    for side in ("erm", "group_dro"):
        block = metrics[side]
        assert {"per_group", "worst_group_accuracy", "average_accuracy", "weight_decay"} <= set(block)
        for g in block["per_group"].values():
            assert 0 <= g["accuracy"] <= 1
    ev = metrics["evaluation"]
    assert ev["groups"] == "label,spurious"
    assert ev["group_dro"]["worst_group_accuracy"] >= ev["erm"]["worst_group_accuracy"] + 0.10
    verify_manifest(pipeline / "debias")


def test_debias_rejects_foreign_split_ids(tmp_path, pipeline):
    bad = tmp_path / "split.csv"
    bad.write_text((pipeline / "split" / "split.csv").read_text() + "999999,0.5,1\n")
    code = run("debias", "--data", pipeline / "train" / "dataset.csv", "--split", bad,
               "--weight-decays", "0", "--out", tmp_path / "o")
    assert code == 3


def test_unknown_split_id_message(tmp_path, caplog):
    data = gen_spurious(tmp_path / "d", n=50)
    split = tmp_path / "split.csv"
    split.write_text("id,prob,z\n" + "".join(f"{i},0.5,{i % 2}\n" for i in range(50))
                     + "999999,0.5,1\n")
    assert run("debias", "--data", data, "--split", split, "--weight-decays", "0",
               "--out", tmp_path / "o") == 3
    assert "999999" in caplog.text


def test_provenance_mismatch(tmp_path, pipeline):
    other = gen_spurious(tmp_path / "other", seed=9)
    code = run("noise-eval", "--data", other, "--split", pipeline / "split" / "split.csv",
               "--out", tmp_path / "o")
    assert code == 3


def test_noise_eval(tmp_path):
    assert run("gen", "blobs", "--n", 600, "--classes", 3, "--dim", 4, "--out", tmp_path / "b") == 0
    assert run("gen", "noise", "--data", tmp_path / "b" / "dataset.csv", "--eta", 0.3,
               "--out", tmp_path / "n") == 0
    noisy = tmp_path / "n" / "dataset.csv"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_outer_iters": 3}))
    assert run("split", "--data", noisy, "--config", cfg, "--out", tmp_path / "s") == 0
    assert run("noise-eval", "--data", noisy, "--split", tmp_path / "s" / "split.csv",
               "--out", tmp_path / "r") == 0
    report = json.loads((tmp_path / "r" / "noise_report.json").read_text())
    assert 0 <= report["precision"] <= report["oracle_precision"] + 1e-12
    assert 0 <= report["recall"] <= report["oracle_recall"] + 1e-12
    _, truth = read_csv(noisy)
    assert report["n_polluted"] == int(truth.polluted.sum())


def test_noise_eval_needs_polluted_column(tmp_path, pipeline):
    code = run("noise-eval", "--data", pipeline / "train" / "dataset.csv",
               "--split", pipeline / "split" / "split.csv", "--out", tmp_path / "o")
    assert code == 3


def test_seed_sweep_summary(tmp_path):
    data = gen_spurious(tmp_path / "d", n=300)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_outer_iters": 2}))
    assert run("split", "--data", data, "--config", cfg, "--seeds", "0,1",
               "--out", tmp_path / "sw") == 0
    summary = json.loads((tmp_path / "sw" / "summary.json").read_text())
    assert summary["seeds"] == [0, 1]
    best = []
    for s in (0, 1):
        rows = [json.loads(l) for l in (tmp_path / "sw" / f"seed_{s}" / "trace.jsonl").read_text().splitlines()]
        best.append(max(r["gap_stats"]["gap"] for r in rows))
    assert summary["best_gap_mean"] == pytest.approx(np.mean(best), abs=1e-12)
    verify_manifest(tmp_path / "sw")


def test_tampered_output_fails_verification(tmp_path):
    gen_spurious(tmp_path / "d", n=50)
    with open(tmp_path / "d" / "dataset.csv", "a") as fh:
        fh.write("\n")
    with pytest.raises(ContractError):
        verify_manifest(tmp_path / "d")
