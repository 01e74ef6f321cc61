"""Command-line interface: exit codes, artifact layout, and byte-level
determinism of every generated output.
"""

import csv
import json
from pathlib import Path

import pytest
import torch

from dgae import cli, images, training
from conftest import micro_doc


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config file, rendered dataset, and a full pretrain->refine->joint chain."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "micro.json"
    cfg_path.write_text(json.dumps(micro_doc()))
    out = root / "runs"
    assert run("dataset", "--config", cfg_path, "--out", out) == 0
    for stage in ("pretrain", "refine", "joint"):
        assert run("train", stage, "--config", cfg_path, "--out", out) == 0
    return {"root": root, "cfg": cfg_path, "out": out, "dataset": out / "dataset"}


# ---------------------------------------------------------------------------
# exit codes and argument validation
# ---------------------------------------------------------------------------

def test_help_exits_zero():
    with pytest.raises(SystemExit) as e:
        run("--help")
    assert e.value.code == 0


def test_unknown_command_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(micro_doc()))
    assert run("frobnicate", "--config", cfg) == 1
    assert "frobnicate" in capsys.readouterr().err


def test_missing_config_file_is_exit_2(tmp_path, capsys):
    assert run("dataset", "--config", tmp_path / "nope.json", "--out", tmp_path) == 2
    assert "nope.json" in capsys.readouterr().err


def test_unknown_config_key_is_exit_1_and_named(tmp_path, capsys):
    doc = micro_doc()
    doc["learning_rate_typo"] = 1.0
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(doc))
    assert run("dataset", "--config", cfg, "--out", tmp_path) == 1
    assert "learning_rate_typo" in capsys.readouterr().err


def test_missing_checkpoint_is_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(micro_doc()))
    code = run("eval", "--config", cfg, "--out", tmp_path)
    assert code == 2
    assert "joint.ckpt" in capsys.readouterr().err


def test_refine_without_pretrain_is_exit_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(micro_doc()))
    assert run("train", "refine", "--config", cfg, "--out", tmp_path / "empty") == 2


def test_nonfinite_training_loss_is_exit_3(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(micro_doc()))
    monkeypatch.setattr(
        training, "l_simple",
        lambda *a, **k: torch.tensor(float("nan"), requires_grad=True),
    )
    assert run("train", "pretrain", "--config", cfg, "--out", tmp_path) == 3
    assert "finite" in capsys.readouterr().err


def test_swap_rejects_unknown_attribute(workspace, capsys):
    img = next(workspace["dataset"].glob("*.png"))
    code = run("swap", "--config", workspace["cfg"], "--out", workspace["out"],
               "--image-a", img, "--image-b", img, "--attr", "hairstyle")
    assert code == 1
    assert "hairstyle" in capsys.readouterr().err


def test_recombine_rejects_bad_donor_spec(workspace, capsys):
    code = run("recombine", "--config", workspace["cfg"], "--out", workspace["out"],
               "--donor", "no-equals-sign")
    assert code == 1
    d = workspace["dataset"]
    code = run("recombine", "--config", workspace["cfg"], "--out", workspace["out"],
               "--donor", f"identity={d / 'id0_bg0_pose0.png'}",
               "--donor", f"background={d / 'id0_bg0_pose0.png'}")
    assert code == 1  # pose donor missing
    assert "pose" in capsys.readouterr().err


def test_recombine_missing_donor_file_is_exit_2(workspace):
    code = run("recombine", "--config", workspace["cfg"], "--out", workspace["out"],
               "--donor", "identity=ghost.png", "--donor", "background=ghost.png",
               "--donor", "pose=ghost.png")
    assert code == 2


# ---------------------------------------------------------------------------
# dataset command
# ---------------------------------------------------------------------------

def test_dataset_artifacts(workspace):
    files = sorted(workspace["dataset"].glob("*.png"))
    assert len(files) == 480
    with open(workspace["dataset"] / "manifest.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["index", "identity", "background", "pose", "file"]
    assert len(rows) == 481
    assert rows[1][4] == "id0_bg0_pose0.png"
    img = images.load_png(workspace["dataset"] / rows[1][4])
    assert img.shape == (3, 16, 16)


def test_dataset_is_byte_deterministic(workspace, tmp_path):
    assert run("dataset", "--config", workspace["cfg"], "--out", tmp_path) == 0
    name = "id2_bg3_pose4.png"
    a = (workspace["dataset"] / name).read_bytes()
    b = (tmp_path / "dataset" / name).read_bytes()
    assert a == b


# ---------------------------------------------------------------------------
# training artifacts
# ---------------------------------------------------------------------------

def test_training_artifacts_exist(workspace):
    out = workspace["out"]
    for stage in ("pretrain", "refine", "joint"):
        assert (out / f"{stage}.ckpt").exists()
        assert (out / f"{stage}_log.csv").exists()
        assert (out / f"{stage}_loss.png").stat().st_size > 0


# ---------------------------------------------------------------------------
# generation commands: layout and byte determinism
# ---------------------------------------------------------------------------

def _png_size(path):
    img = images.load_png(path)
    return tuple(img.shape)


def test_swap_output_and_determinism(workspace, tmp_path):
    a = workspace["dataset"] / "id0_bg0_pose0.png"
    b = workspace["dataset"] / "id3_bg5_pose7.png"
    args = ("swap", "--config", workspace["cfg"], "--image-a", a, "--image-b", b,
            "--attr", "background", "--T-sample", 4,
            "--ckpt", workspace["out"] / "joint.ckpt")
    assert run(*args, "--out", tmp_path / "r1") == 0
    assert run(*args, "--out", tmp_path / "r2") == 0
    # three 16px tiles with 2px separators
    assert _png_size(tmp_path / "r1" / "swap.png") == (3, 16, 3 * 16 + 2 * 2)
    assert (tmp_path / "r1" / "swap.png").read_bytes() == \
        (tmp_path / "r2" / "swap.png").read_bytes()


def test_recombine_output_and_determinism(workspace, tmp_path):
    d = workspace["dataset"]
    args = ("recombine", "--config", workspace["cfg"], "--T-sample", 4,
            "--ckpt", workspace["out"] / "joint.ckpt",
            "--donor", f"identity={d / 'id1_bg0_pose0.png'}",
            "--donor", f"background={d / 'id0_bg4_pose0.png'}",
            "--donor", f"pose={d / 'id0_bg0_pose9.png'}")
    assert run(*args, "--out", tmp_path / "r1") == 0
    assert run(*args, "--out", tmp_path / "r2") == 0
    # three donors plus the recombination: 4 tiles
    assert _png_size(tmp_path / "r1" / "recombine.png") == (3, 16, 4 * 16 + 3 * 2)
    assert (tmp_path / "r1" / "recombine.png").read_bytes() == \
        (tmp_path / "r2" / "recombine.png").read_bytes()


def test_recombine_seed_changes_output(workspace, tmp_path):
    d = workspace["dataset"]
    args = ("recombine", "--config", workspace["cfg"], "--T-sample", 4,
            "--ckpt", workspace["out"] / "joint.ckpt",
            "--donor", f"identity={d / 'id1_bg0_pose0.png'}",
            "--donor", f"background={d / 'id0_bg4_pose0.png'}",
            "--donor", f"pose={d / 'id0_bg0_pose9.png'}")
    assert run(*args, "--out", tmp_path / "s0") == 0
    assert run(*args, "--out", tmp_path / "s1", "--seed", 123) == 0
    assert (tmp_path / "s0" / "recombine.png").read_bytes() != \
        (tmp_path / "s1" / "recombine.png").read_bytes()


def test_interpolate_output_and_determinism(workspace, tmp_path):
    a = workspace["dataset"] / "id0_bg0_pose0.png"
    b = workspace["dataset"] / "id4_bg6_pose3.png"
    args = ("interpolate", "--config", workspace["cfg"], "--image-a", a,
            "--image-b", b, "--alphas", 3, "--T-sample", 4,
            "--ckpt", workspace["out"] / "joint.ckpt")
    assert run(*args, "--out", tmp_path / "r1") == 0
    assert run(*args, "--out", tmp_path / "r2") == 0
    # endpoints plus three interior frames: 5 tiles
    assert _png_size(tmp_path / "r1" / "interpolate.png") == (3, 16, 5 * 16 + 4 * 2)
    assert (tmp_path / "r1" / "interpolate.png").read_bytes() == \
        (tmp_path / "r2" / "interpolate.png").read_bytes()


def test_interpolate_single_mode(workspace, tmp_path):
    a = workspace["dataset"] / "id0_bg0_pose0.png"
    b = workspace["dataset"] / "id4_bg6_pose3.png"
    base = ("interpolate", "--config", workspace["cfg"], "--image-a", a,
            "--image-b", b, "--alphas", 1, "--T-sample", 4, "--mode", "single",
            "--ckpt", workspace["out"] / "joint.ckpt")
    assert run(*base, "--out", tmp_path) == 1  # --attr required
    assert run(*base, "--attr", "pose", "--out", tmp_path) == 0
    assert _png_size(tmp_path / "interpolate.png") == (3, 16, 3 * 16 + 2 * 2)


# ---------------------------------------------------------------------------
# eval command
# ---------------------------------------------------------------------------

def test_eval_artifacts(workspace, tmp_path):
    out = tmp_path / "eval"
    code = run("eval", "--config", workspace["cfg"], "--out", out,
               "--ckpt", workspace["out"] / "joint.ckpt",
               "--pairs", 2, "--T-sample", 4)
    assert code == 0

    with open(out / "perplexity.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["partition", "attribute", "accuracy"]
    assert len(rows) == 10  # 3x3 grid
    names = {"identity", "background", "pose"}
    assert {r[0] for r in rows[1:]} == names and {r[1] for r in rows[1:]} == names
    for r in rows[1:]:
        assert 0.0 <= float(r[2]) <= 1.0

    with open(out / "metrics.csv") as f:
        metrics = {r[0]: r[1] for r in list(csv.reader(f))[1:]}
    assert set(metrics) == {"mse", "ssim", "fid", "lpips", "ppl_T10", "ppl_T50"}
    assert metrics["fid"] == "not computed"
    assert metrics["lpips"] == "not computed"
    assert float(metrics["mse"]) >= 0.0
    assert -1.0 <= float(metrics["ssim"]) <= 1.0
    assert float(metrics["ppl_T10"]) >= 0.0
    assert float(metrics["ppl_T50"]) >= 0.0

    assert (out / "perplexity.png").stat().st_size > 0
    assert (out / "ppl.png").stat().st_size > 0
