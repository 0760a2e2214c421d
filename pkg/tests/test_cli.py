import json
from fractions import Fraction

import numpy as np
import pytest

from david.architecture import BackboneBranch, DavidModel
from david.checkpoint import load_checkpoint, save_checkpoint
from david.cli import main
from david.config import schema
from david.synth import DatasetManifest, save_png

SMALL = ["--set", "channel_scale=1/32", "--set", "crop=16", "--set", "steps_per_epoch=1", "--set", "batch_size=2",
         "--set", "initial_lr=1e-3", "--set", "fine_tune_lr=5e-4", "--set", "val_batch_size=4"]


def synth(out, *extra):
    return main(["synth", "--synthetic", "dots", "--clips", "6", "--size", "16", "--gt-frames", "5",
                 "--seed", "1", "--out", str(out), *extra])


@pytest.fixture(scope="module")
def data7(tmp_path_factory):
    out = tmp_path_factory.mktemp("d7")
    assert synth(out, "--windows", "7") == 0
    return out


def test_synth_window7(data7):
    m = DatasetManifest.read(data7 / "manifest.jsonl")
    assert {r["window"] for r in m.records} == {7} and set(m.subsets) == {"C-DVD-7"}


def test_synth_deterministic_and_refuses_overwrite(tmp_path, capsys):
    assert synth(tmp_path / "a") == 0 and synth(tmp_path / "b") == 0
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    assert synth(tmp_path / "a") == 1
    assert "--force" in capsys.readouterr().err
    assert synth(tmp_path / "a", "--force") == 0


def test_synth_four_subsets(tmp_path, capsys):
    assert main(["synth", "--synthetic", "mixed", "--clips", "16", "--size", "16", "--gt-frames", "3",
                 "--windows", "3,7,11,15", "--out", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert set(summary["subsets"]) == {"C-DVD-3", "C-DVD-7", "C-DVD-11", "C-DVD-15"}


def test_synth_strict_rejects(tmp_path):
    bad = tmp_path / "src" / "bad"
    bad.mkdir(parents=True)
    (bad / "0000.png").write_bytes(b"junk")
    good = tmp_path / "src" / "good"
    for k in range(24):
        save_png(good / f"{k:04d}.png", np.full((16, 16, 3), k / 30))
    assert main(["synth", "--input", str(tmp_path / "src"), "--out", str(tmp_path / "o1"), "--windows", "3"]) == 0
    assert main(["synth", "--input", str(tmp_path / "src"), "--out", str(tmp_path / "o2"), "--strict"]) == 2


def test_usage_errors(tmp_path, data7):
    assert main(["synth", "--bogus"]) == 1
    assert main(["train", "--phase", "1", "--manifest", str(data7 / "manifest.jsonl"), "--run-dir",
                 str(tmp_path), "--set", "bogus=1"]) == 1


def test_train_help_documents_every_key(capsys):
    assert main(["train", "--help"]) == 0
    text = capsys.readouterr().out
    assert all(name in text for name in schema())


def train(run, manifest, *extra):
    return main(["train", "--manifest", str(manifest), "--run-dir", str(run), *SMALL, *extra])


def test_phase1_and_phase2(tmp_path, data7, capsys):
    m = data7 / "manifest.jsonl"
    run = tmp_path / "run"
    assert train(run, m, "--phase", "2", "--blur-level", "7", "--set", "n_branches=2") == 2
    assert "phase1_f1_w7.ckpt" in capsys.readouterr().err
    for f in (1, 3):
        assert train(run, m, "--phase", "1", "--frames", str(f), "--blur-level", "7",
                     "--set", "total_epochs=2") == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["in_channels"] == 9
    assert load_checkpoint(run / "phase1_f3_w7.ckpt").architecture["spec"]["in_channels"] == 9
    assert train(run, m, "--phase", "2", "--blur-level", "7", "--set", "n_branches=2", "--set", "freeze_epochs=1",
                 "--set", "total_epochs=2") == 0
    ck = load_checkpoint(run / "phase2_w7.ckpt")
    assert ck.architecture["blur_level_tag"] == 7 and ck.meta["blur_level"] == 7
    assert (run / "phase2_w7.log").read_text().count("val_psnr") == 2


def test_resume_continues_trajectory(tmp_path, data7):
    m = data7 / "manifest.jsonl"
    args = ["--phase", "1", "--frames", "1", "--blur-level", "7", "--set", "total_epochs=4"]
    assert train(tmp_path / "full", m, *args) == 0
    assert train(tmp_path / "part", m, *args, "--stop-after", "2") == 0
    assert train(tmp_path / "part", m, *args, "--resume") == 0
    a = load_checkpoint(tmp_path / "full/phase1_f1_w7.ckpt")
    b = load_checkpoint(tmp_path / "part/phase1_f1_w7.ckpt")
    assert a.meta["losses"] == b.meta["losses"] and len(a.meta["losses"]) == 4
    assert train(tmp_path / "full", m, *args) == 1


def test_lock_blocks_second_writer(tmp_path, data7):
    (tmp_path / ".lock").write_text("123")
    assert train(tmp_path, data7 / "manifest.jsonl", "--phase", "1", "--frames", "1",
                 "--set", "total_epochs=1") == 2


def test_nan_exit_code(tmp_path, data7):
    code = train(tmp_path, data7 / "manifest.jsonl", "--phase", "1", "--frames", "1", "--set",
                 "total_epochs=5", "--set", "initial_lr=1e30")
    assert code == 3 and (tmp_path / "phase1_f1_w7_nan.ckpt").exists()


def test_eval_identity_oracle(data7, tmp_path, capsys):
    assert main(["eval", "--oracle", "identity", "--manifest", str(data7 / "manifest.jsonl"), "--split", "all",
                 "--out", str(tmp_path)]) == 0
    rows = [json.loads(x) for x in (tmp_path / "identity_eval.jsonl").read_text().splitlines()]
    assert all(r.get("psnr_db", 100.0) == 100.0 and r.get("video_psnr_db", 100.0) == 100.0 for r in rows)
    assert rows[-1]["average_psnr_db"] == 100.0


def frame_dir(path, n, size=16):
    rng = np.random.default_rng(0)
    for k in range(n):
        save_png(path / f"{k:05d}.png", rng.random((size, size, 3)))
    return path


def test_infer_window_arithmetic(tmp_path, capsys):
    ck = save_checkpoint(tmp_path / "b7.ckpt", BackboneBranch(7, Fraction(1, 32), rng=0))
    frames = frame_dir(tmp_path / "in", 7)
    assert main(["infer", "--checkpoint", str(ck), "--input", str(frames), "--out", str(tmp_path / "o")]) == 0
    assert [p.name for p in (tmp_path / "o").iterdir()] == ["00003.png"]
    short = frame_dir(tmp_path / "short", 5)
    capsys.readouterr()
    assert main(["infer", "--checkpoint", str(ck), "--input", str(short), "--out", str(tmp_path / "o2")]) == 2
    assert "at least 7" in capsys.readouterr().err


def test_infer_pads_odd_sizes(tmp_path):
    ck = save_checkpoint(tmp_path / "b1.ckpt", BackboneBranch(1, Fraction(1, 32), rng=0))
    frames = frame_dir(tmp_path / "in", 2, size=20)
    assert main(["infer", "--checkpoint", str(ck), "--input", str(frames), "--out", str(tmp_path / "o")]) == 0
    assert len(list((tmp_path / "o").iterdir())) == 2


def test_attmap_seventeen_images(tmp_path):
    ck = save_checkpoint(tmp_path / "d.ckpt", DavidModel((3, 7, 11), 4, Fraction(1, 32), rng=0))
    frames = frame_dir(tmp_path / "in", 9)
    assert main(["attmap", "--checkpoint", str(ck), "--input", str(frames), "--out", str(tmp_path / "a")]) == 0
    pngs = sorted((tmp_path / "a").glob("*.png"))
    assert len(pngs) == 17
    assert main(["attmap", "--checkpoint", str(ck), "--input", str(frames), "--out", str(tmp_path / "b")]) == 0
    assert all(x.read_bytes() == (tmp_path / "b" / x.name).read_bytes() for x in pngs)
