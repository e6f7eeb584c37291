import csv
import json

import numpy as np
import pytest

from ssimadv import cli
from ssimadv.data import write_idx
from ssimadv.model import build_desk_model, save_checkpoint


@pytest.fixture
def fixture_dir(tmp_path):
    rng = np.random.default_rng(0)
    write_idx(tmp_path / "t10k-images-idx3-ubyte", tmp_path / "t10k-labels-idx1-ubyte",
              rng.integers(0, 256, (20, 8, 8)).astype(np.uint8), np.arange(20) % 3)
    write_idx(tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte",
              rng.integers(0, 256, (12, 8, 8)).astype(np.uint8), np.arange(12) % 3)
    save_checkpoint(build_desk_model((8, 8, 1), 3, seed=1), tmp_path / "model.ckpt")
    return tmp_path


def attack_args(d, *extra):
    return ["attack", "--data-dir", str(d), "--model", str(d / "model.ckpt"),
            "--iters", "10", "--search-steps", "2", "--log-level", "warning", *extra]


def test_attack_single_ssim_row(fixture_dir):
    out = fixture_dir / "o"
    assert cli.main(attack_args(fixture_dir, "--attacks", "ssim", "--limit", "1", "--out", str(out))) == 0
    with open(out / "outcomes.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    attacked = [r for r in rows if r["attack"] != "skipped"]
    assert len(attacked) == 1 and attacked[0]["attack"] == "ssim"
    for name in ("tail_curve.csv", "summary.json", "adversarial.npz"):
        assert (out / name).exists()


@pytest.mark.parametrize("argv", [
    ["attack", "--zeta1", "1.5"],
    ["attack", "--zeta2", "-0.1"],
    ["attack", "--attacks", "fgsm"],
    ["attack", "--seed", "-1"],
    ["attack", "--bogus"],
    ["frobnicate"],
    [],
])
def test_usage_errors_exit_2(argv, capsys):
    assert cli.main(argv) == 2
    assert "error" in capsys.readouterr().err


def test_config_keys_mirror_flags(fixture_dir):
    out = fixture_dir / "c"
    cfg = fixture_dir / "cfg.json"
    cfg.write_text(json.dumps({"attacks": ["pgd", "enet"], "limit": 2, "iters": 10, "search-steps": 2,
                               "model": str(fixture_dir / "model.ckpt"), "data_dir": str(fixture_dir),
                               "out": str(out), "log_level": "warning", "epsilon": 0.1}))
    assert cli.main(["attack", "--config", str(cfg)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert sorted(summary["summaries"]) == ["enet", "pgd"]
    # explicit flags win over the file
    assert cli.main(["attack", "--config", str(cfg), "--attacks", "pgd"]) == 0
    assert list(json.loads((out / "summary.json").read_text())["summaries"]) == ["pgd"]
    cfg.write_text(json.dumps({"zeta1": 2.0}))
    assert cli.main(["attack", "--config", str(cfg)]) == 2
    cfg.write_text(json.dumps({"no_such_flag": 1}))
    assert cli.main(["attack", "--config", str(cfg)]) == 2


def test_every_attack_flag_is_a_config_key():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command").choices["attack"]
    dests = {a.dest for a in sub._actions if a.option_strings and a.dest not in ("help", "config")}
    assert dests <= set(cli.DEFAULTS)


def test_report_regenerates_outputs(fixture_dir):
    out = fixture_dir / "r"
    assert cli.main(attack_args(fixture_dir, "--attacks", "pgd", "--limit", "3", "--out", str(out))) == 0
    tail = (out / "tail_curve.csv").read_bytes()
    summary = (out / "summary.json").read_bytes()
    (out / "tail_curve.csv").unlink()
    (out / "summary.json").unlink()
    assert cli.main(["report", "--out", str(out), "--data-dir", str(fixture_dir)]) == 0
    assert (out / "tail_curve.csv").read_bytes() == tail
    new, old = (json.loads(x)["summaries"]["pgd"] for x in ((out / "summary.json").read_bytes(), summary))
    assert (new["attacked"], new["successes"], new["tail"]) == (old["attacked"], old["successes"], old["tail"])
    # the CSV keeps 6 significant digits
    assert new["mean_l2"] == pytest.approx(old["mean_l2"], rel=1e-5)


def test_attack_is_deterministic(fixture_dir):
    a, b = fixture_dir / "a", fixture_dir / "b"
    for out in (a, b):
        assert cli.main(attack_args(fixture_dir, "--limit", "3", "--out", str(out), "--seed", "5")) == 0
    for name in ("outcomes.csv", "tail_curve.csv", "summary.json", "adversarial.npz"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_train_writes_checkpoint(fixture_dir):
    ckpt = fixture_dir / "trained.ckpt"
    rc = cli.main(["train", "--data-dir", str(fixture_dir), "--model", str(ckpt), "--epochs", "1",
                   "--pgd-steps", "1", "--log-level", "warning"])
    assert rc == 0 and ckpt.exists()


def test_missing_files_exit_1(fixture_dir, capsys):
    assert cli.main(["attack", "--data-dir", str(fixture_dir), "--model", str(fixture_dir / "nope")]) == 1
    assert "nope" in capsys.readouterr().err


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    assert capsys.readouterr().out.count("[PASS]") == 5
