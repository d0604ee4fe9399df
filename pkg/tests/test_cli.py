import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from mcsdnet import training, verify
from mcsdnet.cli import main, run_training
from mcsdnet.config import load_config
from mcsdnet.data import load_manifest, read_gray
from mcsdnet.evaluation import OVERLAY_COLORS, ConfusionCounts, confusion
from mcsdnet.numerics import Tensor

SYNTH = 'scenes = 2\nframes_per_scene = 8\nimage_size = [16, 16]\ncoverage = [0.03, 0.15]\n'
RUN = """levels = 2
channels = [4, 4]
groups = 2
heads = 2
stmu_depth = 1
atrous_rates = [1, 2]
image_size = [16, 16]
width = 3
interval = 15
epochs = 2
batch_size = 4
data = "train/manifest.csv"
val_data = "val/manifest.csv"
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.toml").write_text(SYNTH)
    assert main(["synth", "--config", str(root / "synth.toml"), "--seed", "1", "--out", str(root / "train")]) == 0
    assert main(["synth", "--config", str(root / "synth.toml"), "--seed", "2", "--out", str(root / "val")]) == 0
    (root / "run.toml").write_text(RUN)
    assert main(["train", "--config", str(root / "run.toml"), "--out", str(root / "run")]) == 0
    return root


def kv(path):
    return dict(line.split("=", 1) for line in path.read_text().splitlines())


def drop_seconds(csv_text):
    return [line.rsplit(",", 1)[0] for line in csv_text.splitlines()]


def test_synth_writes_dataset(workspace):
    m = load_manifest(workspace / "train" / "manifest.csv")
    assert len(m) == 16
    assert len(list((workspace / "train" / "images").iterdir())) == 16


def test_train_artifacts(workspace):
    run = workspace / "run"
    assert sorted(p.name for p in run.iterdir()) == ["best.ckpt", "config.toml", "last.ckpt", "log.csv"]
    assert load_config(run / "config.toml") == load_config(workspace / "run.toml")
    lines = (run / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr,seconds" and len(lines) == 3
    ck = training.load_checkpoint(run / "last.ckpt")
    assert ck.epoch == 2 and ck.train_config["width"] == 3


def test_train_is_deterministic(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "run.toml"), "--out", str(tmp_path)]) == 0
    assert drop_seconds((tmp_path / "log.csv").read_text()) == drop_seconds((workspace / "run" / "log.csv").read_text())
    assert (tmp_path / "last.ckpt").read_bytes() == (workspace / "run" / "last.ckpt").read_bytes()


def test_train_seed_flag_changes_run(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "run.toml"), "--seed", "5", "--out", str(tmp_path)]) == 0
    assert drop_seconds((tmp_path / "log.csv").read_text()) != drop_seconds((workspace / "run" / "log.csv").read_text())


def test_invalid_key_exits_1_naming_it(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(RUN + "dropout = 0.1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "dropout" in capsys.readouterr().err


def test_missing_data_exits_2(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(RUN)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_eval_reproduces_final_validation(workspace, tmp_path):
    cfg = load_config(workspace / "run.toml")
    log = run_training(cfg, tmp_path / "again")
    assert main(["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"),
                 "--data", str(workspace / "val" / "manifest.csv"), "--out", str(tmp_path / "ev")]) == 0
    got = kv(tmp_path / "ev" / "metrics.kv")
    last = log.records[-1]
    c = last.val_counts
    assert [int(got[f"overall.{k}"]) for k in ("tp", "fp", "fn", "tn")] == [c.tp, c.fp, c.fn, c.tn]
    assert float(got["loss"]) == last.val_loss
    assert sorted(p.name for p in (tmp_path / "ev").iterdir()) == ["bins.csv", "metrics.kv", "metrics.txt"]


def test_eval_oracle_masks_are_perfect(workspace, tmp_path):
    assert main(["eval", "--config", str(workspace / "run.toml"), "--predictions", str(workspace / "val" / "masks"),
                 "--out", str(tmp_path)]) == 0
    got = kv(tmp_path / "metrics.kv")
    assert (got["overall.pod"], got["overall.far"], got["overall.csi"]) == ("1.0", "0.0", "1.0")


def test_eval_custom_bins(workspace, tmp_path):
    assert main(["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--bins", "0,5,10",
                 "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "bins.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["0%-5%", "5%-10%", "10%-"]


def test_eval_empty_set_exits_2(workspace, tmp_path, capsys):
    short = tmp_path / "short.csv"
    lines = (workspace / "val" / "manifest.csv").read_text().splitlines()
    short.write_text("\n".join(lines[:3]).replace("images/", str(workspace / "val" / "images") + "/")
                     .replace("masks/", str(workspace / "val" / "masks") + "/") + "\n")
    assert main(["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--data", str(short),
                 "--out", str(tmp_path / "o")]) == 2
    assert "no complete sequence" in capsys.readouterr().err


def test_eval_mismatch_reports_both_shapes(workspace, tmp_path, capsys):
    other = tmp_path / "other.toml"
    other.write_text(RUN.replace("channels = [4, 4]", "channels = [4, 8]"))
    assert main(["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--config", str(other),
                 "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "mismatch" in err and "(4, 4, 3, 3)" in err and "(8, 4, 3, 3)" in err


def test_eval_needs_a_source(tmp_path):
    assert main(["eval", "--out", str(tmp_path)]) == 1


def test_predict_masks_and_overlays(workspace, tmp_path, capsys):
    assert main(["predict", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--data", str(workspace / "val"),
                 "--overlay", "--out", str(tmp_path)]) == 0
    masks = sorted((tmp_path / "masks").iterdir())
    assert len(masks) == 16
    m = load_manifest(workspace / "val" / "manifest.csv")
    for rec in m.records:
        name = rec.image.stem + ".png"
        pred = read_gray(tmp_path / "masks" / name)[0] // 255
        gt = read_gray(rec.mask)[0] // 255
        rgb = np.asarray(Image.open(tmp_path / "overlays" / name))
        c = confusion(pred, gt)
        counts = {k: int(np.all(rgb == v, axis=-1).sum()) for k, v in OVERLAY_COLORS.items()}
        assert ConfusionCounts(counts["tp"], counts["fp"], counts["fn"], int(np.all(rgb == 0, axis=-1).sum())) == c


def test_predict_all_zero_model_marks_gt_red(workspace, tmp_path):
    ck = training.load_checkpoint(workspace / "run" / "last.ckpt")
    ck.params["head.bias"] = np.full_like(ck.params["head.bias"], -60.0)
    training.save_checkpoint(tmp_path / "zero.ckpt", ck)
    assert main(["predict", "--checkpoint", str(tmp_path / "zero.ckpt"), "--data", str(workspace / "val"),
                 "--overlay", "--out", str(tmp_path / "p")]) == 0
    for rec in load_manifest(workspace / "val" / "manifest.csv").records:
        rgb = np.asarray(Image.open(tmp_path / "p" / "overlays" / (rec.image.stem + ".png")))
        gt = read_gray(rec.mask)[0] > 0
        red = np.all(rgb == OVERLAY_COLORS["fn"], axis=-1)
        np.testing.assert_array_equal(red, gt)
        assert not np.any(np.all(rgb == OVERLAY_COLORS["tp"], axis=-1))


def test_predict_missing_frames_exit_2(workspace, tmp_path, capsys):
    sparse = tmp_path / "sparse.csv"
    lines = (workspace / "val" / "manifest.csv").read_text().splitlines()
    # every third frame gone: the 15 min cadence survives but no 3-frame window does
    keep = [lines[0]] + [line for i, line in enumerate(lines[1:]) if i % 3 != 2]
    base = str(workspace / "val") + "/"
    sparse.write_text("\n".join(keep).replace("images/", base + "images/").replace("masks/", base + "masks/") + "\n")
    assert main(["predict", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--data", str(sparse),
                 "--out", str(tmp_path / "o")]) == 2
    assert "missing" in capsys.readouterr().err


def test_output_root_from_environment(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("MCSDNET_OUT", str(tmp_path))
    assert main(["synth", "--config", str(workspace / "synth.toml")]) == 0
    assert (tmp_path / "synth" / "manifest.csv").is_file()


def test_verify_passes(tmp_path, capsys):
    assert main(["verify", "--suite", "all", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "verify.json").read_text())
    assert report["passed"] and not report["failures"]
    suites = {c["suite"] for c in report["checks"]}
    assert suites == set(verify.SUITES)


def test_verify_catches_flipped_loss_gradient(monkeypatch, capsys):
    real = training.focal_loss

    def flipped(p, y, cfg=None):
        loss = real(p, y, cfg)
        return Tensor._from_op(loss.data, (loss,), lambda g: (-g,), "flip")

    monkeypatch.setattr(training, "focal_loss", flipped)
    assert main(["verify", "--suite", "grad"]) == 3
    report = json.loads(capsys.readouterr().out)
    assert "focal_loss" in report["failures"]


def test_unknown_suite_is_usage_error():
    assert main(["verify", "--suite", "speed"]) == 1
    assert main([]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mcsdnet", "verify", "--suite", "metrics"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["passed"] is True
