import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from semiseg.cli import main
from semiseg.networks import read_checkpoint_header
from semiseg.viz import load_gray_png, save_gray_png

TINY = {
    "phantom": {"image_size": 32, "patients_per_vendor": {"A": 5, "B": 5, "C": 3}, "slices": 2},
    "network": {"depth": 1, "base_filters": 2},
    "train": {"epochs": 1, "batch_size": 8},
    "scenarios": {"crop": 32},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("SEMISEG_OUTPUT_ROOT", str(root))
    return root


def _files(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


# --- generate --------------------------------------------------------------

def test_generate_default_is_25_patients_and_reproducible(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "effective configuration" in out and "patients: 25" in out
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(manifest["patients"]) == 25
    assert main(["generate", "--out", str(tmp_path / "b")]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_generate_seed_changes_blobs(tmp_path, tiny_config):
    main(["generate", "--config", tiny_config, "--out", str(tmp_path / "a")])
    main(["generate", "--config", tiny_config, "--seed", "5", "--out", str(tmp_path / "b")])
    assert _files(tmp_path / "a") != _files(tmp_path / "b")


def test_generate_invalid_vendor_profile_leaves_nothing(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"phantom": {"patients_per_vendor": {"A": 5, "Z": 2}}}))
    out = tmp_path / "cohort"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) != 0
    assert "error:" in capsys.readouterr().err
    assert not out.exists() and list(tmp_path.iterdir()) == [cfg]


def test_generate_refuses_non_empty_output(tmp_path, tiny_config):
    out = tmp_path / "c"
    assert main(["generate", "--config", tiny_config, "--out", str(out)]) == 0
    assert main(["generate", "--config", tiny_config, "--out", str(out)]) == 1
    assert main(["generate", "--config", tiny_config, "--out", str(out), "--overwrite"]) == 0


def test_default_output_root_env(tiny_config, output_root):
    assert main(["generate", "--config", tiny_config]) == 0
    assert (output_root / "cohort" / "manifest.json").exists()


# --- config ----------------------------------------------------------------

@pytest.mark.parametrize("doc", [{"bogus": 1}, {"train": {"epoch": 3}}, {"network": {"width": 2}},
                                 {"augmentation": {"rotate": True}}, {"scenarios": {"kinds": ["XX"]}}])
def test_unknown_config_keys_rejected(tmp_path, capsys, doc):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 1
    assert "error:" in capsys.readouterr().err
    assert not (tmp_path / "t").exists()


def test_defaults_round_trip(capsys, tmp_path):
    assert main(["defaults"]) == 0
    text = capsys.readouterr().out
    cfg = tmp_path / "d.json"
    cfg.write_text(text)
    from semiseg.config import RunConfig
    assert RunConfig.load(cfg).to_json() == text.strip()


# --- train / evaluate / pseudo-label --------------------------------------

def test_invalid_profile_exits_nonzero(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--profile", "huge", "--out", str(tmp_path / "t")])
    assert exc.value.code != 0
    assert not (tmp_path / "t").exists()


def test_smoke_train_under_a_minute(tmp_path, capsys):
    t0 = time.perf_counter()
    assert main(["train", "--profile", "smoke", "--out", str(tmp_path / "t")]) == 0
    assert time.perf_counter() - t0 < 60
    assert {"best.ckpt", "metrics.csv", "summary.json"} <= set(_files(tmp_path / "t"))
    summary = json.loads((tmp_path / "t" / "summary.json").read_text())
    assert summary["config"]["network"]["depth"] == 2 and summary["config"]["train"]["epochs"] == 5
    assert summary["config"]["crop"] == 32
    assert "effective configuration (train)" in capsys.readouterr().out


@pytest.mark.parametrize("arch,residual", [("unet", False), ("resunet", True)])
def test_arch_flag_selects_builder(tmp_path, tiny_config, arch, residual):
    out = tmp_path / arch
    assert main(["train", "--config", tiny_config, "--arch", arch, "--out", str(out)]) == 0
    assert read_checkpoint_header(out / "best.ckpt")["config"]["residual"] is residual


@pytest.mark.parametrize("flag,column", [("dice", "loss_dice"), ("ce", "loss_cross_entropy"),
                                         ("both", "loss_sum_of_both")])
def test_loss_flag_changes_column_header(tmp_path, tiny_config, flag, column):
    out = tmp_path / flag
    assert main(["train", "--config", tiny_config, "--loss", flag, "--out", str(out)]) == 0
    header = (out / "metrics.csv").read_text().splitlines()[0].split(",")
    assert header[-1] == column


def test_evaluate_and_pseudo_label(tmp_path, tiny_config, capsys):
    main(["generate", "--config", tiny_config, "--out", str(tmp_path / "cohort")])
    manifest = str(tmp_path / "cohort" / "manifest.json")
    main(["train", "--config", tiny_config, "--manifest", manifest, "--out", str(tmp_path / "t")])
    ckpt = str(tmp_path / "t" / "best.ckpt")
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", ckpt, "--manifest", manifest, "--split", "validation"]) == 0
    assert '"average"' in capsys.readouterr().out
    assert main(["pseudo-label", "--checkpoint", ckpt, "--manifest", manifest, "--vacuous",
                 "--out", str(tmp_path / "p")]) == 0
    summary = json.loads((tmp_path / "p" / "summary.json").read_text())
    assert summary["acceptance_rate"] == 1.0 and summary["rejected"] == 0


def test_missing_checkpoint(tmp_path, capsys):
    assert main(["evaluate", "--checkpoint", str(tmp_path / "none.ckpt")]) == 1
    assert "none.ckpt" in capsys.readouterr().err


# --- scenarios / report ----------------------------------------------------

def test_scenarios_only_subset(tmp_path, tiny_config, capsys):
    out = tmp_path / "sc"
    assert main(["scenarios", "--config", tiny_config, "--only", "FS,SSH", "--seed", "0", "--out", str(out)]) == 0
    with open(out / "table.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["scenario"] for r in rows] == ["FS", "SSH"]
    head = (out / "table.txt").read_text().splitlines()[1].split()
    assert head[1:7] == ["Tr-LV", "Val-LV", "Tr-RV", "Val-RV", "Tr-Myo", "Val-Myo"]
    assert {"dice.csv", "audit.csv", "summary.json"} <= set(_files(out))
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert "SSH" in capsys.readouterr().out


def test_scenarios_unknown_kind(tmp_path, tiny_config, capsys):
    assert main(["scenarios", "--config", tiny_config, "--only", "FS,XX", "--out", str(tmp_path / "sc")]) == 1
    assert "XX" in capsys.readouterr().err


# --- histmatch -------------------------------------------------------------

def _png(path, image):
    save_gray_png(image, path)
    return str(path)


def test_histmatch_self_match(tmp_path):
    img = np.random.default_rng(0).random((48, 48))
    src = _png(tmp_path / "s.png", img)
    assert main(["histmatch", src, src, str(tmp_path / "m.png")]) == 0
    diff = np.abs(load_gray_png(tmp_path / "m.png") - load_gray_png(src)) * 255
    assert diff.max() <= 1.0 + 1e-9
    assert (tmp_path / "m_triptych.png").exists()


def test_histmatch_dark_to_bright(tmp_path):
    rng = np.random.default_rng(1)
    dark = _png(tmp_path / "d.png", rng.random((64, 64)) * 0.3)
    bright = _png(tmp_path / "b.png", 0.5 + 0.5 * rng.random((64, 64)) ** 2)
    assert main(["histmatch", dark, bright, str(tmp_path / "m.png")]) == 0
    out_mean = load_gray_png(tmp_path / "m.png").mean() * 255
    assert abs(out_mean - load_gray_png(bright).mean() * 255) <= 5


def test_histmatch_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.png"
    assert main(["histmatch", str(missing), str(missing), str(tmp_path / "m.png")]) != 0
    assert str(missing) in capsys.readouterr().err
    assert not (tmp_path / "m.png").exists()


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "semiseg.cli", "defaults"], capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["network"]["depth"] == 3


def test_shipped_config_profiles_load():
    from semiseg.config import RunConfig
    root = Path(__file__).resolve().parent.parent / "configs"
    assert RunConfig.load(root / "desk.json").to_json() == RunConfig().to_json()
    t12, t3 = RunConfig.load(root / "full_ce300.json"), RunConfig.load(root / "full_dice500.json")
    assert (t12.train.epochs, t12.train.loss) == (300, "cross_entropy")
    assert (t3.train.epochs, t3.train.loss) == (500, "dice")
