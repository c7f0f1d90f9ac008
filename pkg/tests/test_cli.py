import hashlib
import json
from pathlib import Path

import pytest

from sarfuse import cli, training
from sarfuse.evaluation import read_csv

from conftest import SMALL_BACKBONE

TINY_TRAIN = {"learning_rate": 1e-3, "batch_size": 8, "max_epochs": 2, "patience": 1, "patch_size": 32,
              "backbone": {"feature_channels": 4, "depth": 2, "base_width": 4}}
TINY_SIM = ["--sites", "3", "--tiles", "3", "--dropout", "0.3"]


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "train.json"
    path.write_text(json.dumps(TINY_TRAIN))
    return path


def test_synth(tmp_path, capsys):
    assert cli.main(["synth", "--sites", "10", "--tiles", "24", "--dropout", "0.12", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "manifest.json").is_file()
    assert "manifest.json" in capsys.readouterr().out


def test_synth_bad_dropout(tmp_path):
    assert cli.main(["synth", "--dropout", "1.5", "--out", str(tmp_path)]) == 2


def test_synth_too_few_sites(tmp_path):
    assert cli.main(["synth", "--sites", "2", "--out", str(tmp_path)]) == 1


def test_synth_reproducible(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["synth", *TINY_SIM, "--sim-seed", "4", "--out", str(tmp_path / name)]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    cli.main(["synth", *TINY_SIM, "--sim-seed", "5", "--out", str(tmp_path / "c")])
    assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "c")


def test_synth_config_file_and_env_seed(tmp_path, monkeypatch):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"num_sites": 3, "timestamps_per_site": 2, "dropout_rate": 0.0}))
    monkeypatch.setenv("SARFUSE_SEED", "9")
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["simulator"]["seed"] == 9 and manifest["simulator"]["num_sites"] == 3


def test_unknown_subcommand():
    assert cli.main(["fly"]) == 2


def test_bad_train_config(tmp_path, sim_root):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"patience": 5, "max_epochs": 3}))
    assert cli.main(["train", "--config", str(bad), "--data", str(sim_root), "--out", str(tmp_path / "o")]) == 2


def test_train_evaluate_report(tmp_path, sim_root, tiny_config, capsys):
    out = tmp_path / "runs"
    assert cli.main(["train", "--config", str(tiny_config), "--data", str(sim_root), "--out", str(out),
                     "--variant", "ds-zerofill", "--seed", "3", "--runs", "2"]) == 0
    assert {p.name for p in out.iterdir() if p.is_dir()} == {"seed_3", "seed_4"}
    history = (out / "seed_3" / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,val_f1,val_iou,train_loss"

    ev = tmp_path / "eval"
    assert cli.main(["evaluate", "--checkpoint", str(out), "--data", str(sim_root), "--out", str(ev)]) == 0
    table = read_csv(ev / "eval.csv")
    assert table.variants == ["ds-zerofill"] and table.seeds("ds-zerofill") == [3, 4]

    single = tmp_path / "eval1"
    assert cli.main(["evaluate", "--checkpoint", str(out / "seed_3" / "best.pt"), "--data", str(sim_root),
                     "--out", str(single), "--threshold", "0.4"]) == 0
    assert read_csv(single / "eval.csv").seeds("ds-zerofill") == [3]

    rep = tmp_path / "rep"
    assert cli.main(["report", "--in", str(ev), "--out", str(rep)]) == 0
    assert (rep / "results.md").is_file() and (rep / "results_f1.png").is_file()
    assert "ds-zerofill" in capsys.readouterr().out


def test_evaluate_missing_checkpoint(tmp_path, sim_root):
    assert cli.main(["evaluate", "--checkpoint", str(tmp_path), "--data", str(sim_root),
                     "--out", str(tmp_path / "o")]) == 2


def test_bench_single_variant(tmp_path, tiny_config, capsys):
    code = cli.main(["bench", "--out", str(tmp_path / "b"), "--config", str(tiny_config), *TINY_SIM,
                     "--variants", "proposed", "--runs", "1"])
    assert code == 0
    out = capsys.readouterr().out
    assert "ordering checks skipped" in out
    md = (tmp_path / "b" / "report" / "results.md").read_text().strip().splitlines()
    assert len(md) == 3


def test_bench_resume_skips_completed(tmp_path, tiny_config, monkeypatch):
    args = ["bench", "--out", str(tmp_path / "b"), "--config", str(tiny_config), *TINY_SIM,
            "--variants", "unimodal-sar", "--runs", "2"]
    assert cli.main(args) == 0
    before = (tmp_path / "b" / "report" / "results.csv").read_text()

    def boom(*a, **k):
        raise AssertionError("retrained a completed seed")
    monkeypatch.setattr(training, "train", boom)
    assert cli.main(args + ["--resume"]) == 0
    assert (tmp_path / "b" / "report" / "results.csv").read_text() == before


def test_bench_all_variants_reports_orderings(tmp_path, tiny_config, capsys):
    code = cli.main(["bench", "--out", str(tmp_path / "b"), "--config", str(tiny_config), *TINY_SIM,
                     "--runs", "1"])
    assert code in (0, 1)
    checks = json.loads((tmp_path / "b" / "report" / "orderings.json").read_text())
    assert len(checks) == 4
    assert code == (0 if all(c["passed"] for c in checks) else 1)
    md = (tmp_path / "b" / "report" / "results.md").read_text().strip().splitlines()
    assert len(md) == 5
