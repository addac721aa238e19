import csv
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from rgmreg.cli import main
from rgmreg.data import load_xyz, save_xyz
from rgmreg.training import read_checkpoint

ROOT = Path(__file__).resolve().parent.parent
DESK = str(ROOT / "configs" / "desk.conf")
TINY = ["--config", DESK, "--set", "n_points=24", "--set", "K=5"]


@pytest.fixture(autouse=True)
def quiet(monkeypatch):
    monkeypatch.setenv("RGM_LOG", "quiet")


def run(*argv):
    return main([str(a) for a in argv])


def generate(out, train=4, val=2, test=3, protocol="clean", extra=()):
    code = run("generate", "--out", out, "--protocol", protocol, *TINY, "--set", f"n_train={train}",
               "--set", f"n_val={val}", "--set", f"n_test={test}", *extra)
    assert code == 0
    return out


@pytest.fixture
def dataset(tmp_path):
    return generate(tmp_path / "data")


@pytest.fixture
def checkpoint(tmp_path, dataset):
    assert run("train", "--data", dataset, "--out", tmp_path / "run", "--epochs", 1, *TINY) == 0
    return tmp_path / "run" / "model.rgmw"


# generate


def test_generate_ten_clean_samples(tmp_path, capsys):
    out = generate(tmp_path / "d", train=10, val=0, test=0)
    assert len(list(out.glob("*.xyz"))) == 20
    rows = [ln for ln in (out / "manifest.txt").read_text().splitlines() if not ln.startswith("#")]
    assert len(rows) == 10
    assert re.search(r"config checksum [0-9a-f]{16}", capsys.readouterr().out)


def test_generate_is_reproducible(tmp_path):
    a = generate(tmp_path / "a")
    b = generate(tmp_path / "b")
    assert (a / "manifest.txt").read_bytes() == (b / "manifest.txt").read_bytes()
    assert (a / "test_00002_tgt.xyz").read_bytes() == (b / "test_00002_tgt.xyz").read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    a = generate(tmp_path / "a", extra=("--seed", 1))
    b = generate(tmp_path / "b", extra=("--seed", 2))
    assert (a / "train_00000_src.xyz").read_bytes() != (b / "train_00000_src.xyz").read_bytes()


def test_bad_protocol_is_a_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("generate", "--out", tmp_path / "d", "--protocol", "blurry")
    assert exc.value.code != 0
    assert "invalid choice" in capsys.readouterr().err


def test_generate_refuses_non_empty_dir(tmp_path, dataset):
    assert run("generate", "--out", dataset, *TINY) == 1
    assert run("generate", "--out", dataset, "--force", *TINY) == 0


def test_unknown_config_key(tmp_path, capsys):
    assert run("generate", "--out", tmp_path / "d", "--set", "colour=blue") == 1
    assert "unknown keys" in capsys.readouterr().err


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text("n_points = many\n")
    assert run("generate", "--out", tmp_path / "d", "--config", bad) == 1
    assert run("generate", "--out", tmp_path / "d", "--config", tmp_path / "missing.conf") == 1


# train


def test_train_writes_checkpoint_and_log(tmp_path, dataset, capsys):
    assert run("train", "--data", dataset, "--out", tmp_path / "run", "--epochs", 2, *TINY) == 0
    log = list(csv.reader(open(tmp_path / "run" / "train_log.csv")))
    assert log[0] == ["epoch", "mean_loss", "val_recall", "val_mie_r", "val_mie_t"]
    assert [r[0] for r in log[1:]] == ["1", "2"]
    _, echo = read_checkpoint(tmp_path / "run" / "model.rgmw")
    assert echo["epoch"] == "2" and echo["V"] == "64"
    assert "trained to epoch 2" in capsys.readouterr().out


def test_resume_continues_epoch_numbering(tmp_path, dataset, checkpoint):
    assert run("train", "--data", dataset, "--out", tmp_path / "run", "--epochs", 2,
               "--resume", checkpoint, *TINY) == 0
    log = list(csv.reader(open(tmp_path / "run" / "train_log.csv")))
    assert [r[0] for r in log[1:]] == ["1", "2", "3"]
    _, echo = read_checkpoint(checkpoint)
    assert echo["epoch"] == "3"


def test_train_missing_dataset(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nothing", "--out", tmp_path / "run", *TINY) == 1
    assert "no dataset" in capsys.readouterr().err


def test_train_divergence_exits_2(tmp_path, dataset, monkeypatch):
    from rgmreg import cli
    from rgmreg.training import TrainResult

    monkeypatch.setattr(cli, "train", lambda *a, **k: TrainResult(diverged=True))
    assert run("train", "--data", dataset, "--out", tmp_path / "run", *TINY) == 2
    assert not (tmp_path / "run" / "model.rgmw").exists()


# register


def test_register_identity_with_oracle(tmp_path, rng, capsys):
    X = rng.normal(size=(12, 3))
    save_xyz(tmp_path / "a.xyz", X)
    assert run("register", tmp_path / "a.xyz", tmp_path / "a.xyz", "--method", "oracle",
               "--aligned", tmp_path / "out.xyz") == 0
    out = capsys.readouterr().out.splitlines()
    i = out.index("R")
    R = np.array([[float(v) for v in ln.split()] for ln in out[i + 1:i + 4]])
    t = np.array([float(v) for v in out[i + 5].split()])
    np.testing.assert_allclose(R, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(t, 0.0, atol=1e-9)
    np.testing.assert_allclose(load_xyz(tmp_path / "out.xyz"), X, atol=1e-12)


def test_register_prints_metrics_with_gt(tmp_path, dataset, capsys):
    src, tgt = dataset / "test_00000_src.xyz", dataset / "test_00000_tgt.xyz"
    # the first three lines of a .gt file are the 3x4 [R|t] matrix
    (tmp_path / "gt.txt").write_text("".join(open(dataset / "test_00000.gt").readlines()[:3]))
    assert run("register", src, tgt, "--method", "icp", "--gt", tmp_path / "gt.txt") == 0
    assert re.search(r"mie_r_deg \S+ mie_t \S+ mae_r_deg \S+ mae_t \S+ ccd \S+", capsys.readouterr().out)


def test_register_with_checkpoint(tmp_path, dataset, checkpoint, capsys):
    src, tgt = dataset / "test_00000_src.xyz", dataset / "test_00000_tgt.xyz"
    for method in ("rgm", "rgm_var1", "rgm_var2"):
        assert run("register", src, tgt, "--method", method, "--checkpoint", checkpoint) == 0
    assert capsys.readouterr().out.count("\nt\n") == 3


def test_register_rejects_zero_iters(tmp_path, rng):
    save_xyz(tmp_path / "a.xyz", rng.normal(size=(8, 3)))
    assert run("register", tmp_path / "a.xyz", tmp_path / "a.xyz", "--method", "oracle", "--iters", 0) == 1


def test_register_small_cloud(tmp_path, rng, checkpoint, capsys):
    save_xyz(tmp_path / "a.xyz", rng.normal(size=(5, 3)))
    assert run("register", tmp_path / "a.xyz", tmp_path / "a.xyz", "--checkpoint", checkpoint) == 1
    assert "K=5" in capsys.readouterr().err


def test_register_bad_file(tmp_path, capsys):
    (tmp_path / "a.xyz").write_text("0 0 0\n1 one 0\n")
    assert run("register", tmp_path / "a.xyz", tmp_path / "a.xyz", "--method", "icp") == 1
    assert "line 2" in capsys.readouterr().err


def test_register_needs_checkpoint(tmp_path, rng):
    save_xyz(tmp_path / "a.xyz", rng.normal(size=(30, 3)))
    assert run("register", tmp_path / "a.xyz", tmp_path / "a.xyz", "--method", "rgm") == 1
    assert run("register", tmp_path / "a.xyz", tmp_path / "a.xyz", "--checkpoint", tmp_path / "no.rgmw") == 1


# eval and ablate


def test_eval_oracle(tmp_path, dataset, capsys):
    assert run("eval", "--data", dataset, "--out", tmp_path / "ev", "--method", "oracle",
               "--dump-images", *TINY) == 0
    assert "oracle: recall 1.0000" in capsys.readouterr().out
    rows = list(csv.reader(open(tmp_path / "ev" / "metrics_oracle.csv")))
    assert len(rows) == 1 + 3 + 1
    assert (tmp_path / "ev" / "correspondences_oracle.pgm").read_bytes().startswith(b"P5")


def test_eval_learned_needs_checkpoint(tmp_path, dataset, capsys):
    assert run("eval", "--data", dataset, "--out", tmp_path / "ev", "--method", "rgm") == 1
    assert not (tmp_path / "ev").exists()


def test_eval_is_deterministic(tmp_path, dataset, checkpoint):
    for name in ("a", "b"):
        assert run("eval", "--data", dataset, "--out", tmp_path / name, "--method", "rgm",
                   "--checkpoint", checkpoint, "--jobs", 2 if name == "b" else 1) == 0
    assert (tmp_path / "a" / "metrics_rgm.csv").read_bytes() == (tmp_path / "b" / "metrics_rgm.csv").read_bytes()


def test_ablation_table(tmp_path, dataset, checkpoint, capsys):
    assert run("ablate", "--data", dataset, "--out", tmp_path / "ab", "--checkpoint", checkpoint) == 0
    rows = list(csv.reader(open(tmp_path / "ab" / "ablation.csv")))
    assert rows[0] == ["method", "mie_r_deg", "mie_t", "mae_r_deg", "mae_t", "ccd", "recall", "precision"]
    assert [r[0] for r in rows[1:]] == ["rgm", "rgm_var1", "rgm_var2"]
    for method in ("rgm", "rgm_var1", "rgm_var2"):
        assert (tmp_path / "ab" / f"metrics_{method}.csv").exists()


def test_ablation_failure_exits_2(tmp_path, dataset, checkpoint, monkeypatch):
    from rgmreg import cli

    real = cli.evaluate

    def flaky(samples, method, *a, **k):
        if method == "rgm_var2":
            raise RuntimeError("boom")
        return real(samples, method, *a, **k)

    monkeypatch.setattr(cli, "evaluate", flaky)
    assert run("ablate", "--data", dataset, "--out", tmp_path / "ab", "--checkpoint", checkpoint) == 2
    assert len(list(csv.reader(open(tmp_path / "ab" / "ablation.csv")))) == 3


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "rgmreg.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("generate", "train", "register", "eval", "ablate"):
        assert cmd in out.stdout


@pytest.mark.slow
def test_toy_training_run(tmp_path):
    import time

    data = tmp_path / "toy"
    assert run("generate", "--out", data, "--config", DESK, "--set", "n_points=32") == 0
    start = time.perf_counter()
    assert run("train", "--data", data, "--out", tmp_path / "run", "--config", DESK,
               "--set", "n_points=32", "--epochs", 3) == 0
    assert time.perf_counter() - start < 600
    assert len((tmp_path / "run" / "train_log.csv").read_text().splitlines()) == 4
