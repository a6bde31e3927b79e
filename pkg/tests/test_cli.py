import subprocess
import sys

import numpy as np
import pytest
import torch
from PIL import Image

from uhdpromer.checkpoint import save_checkpoint
from uhdpromer.cli import REFERENCE_VARIANT_PARAMS, build_parser, configs_from_args, main
from uhdpromer.data import save_image
from uhdpromer.model import ModelConfig, build_model

SMALL = ["--channels", "4", "--blocks", "2", "--heads", "2", "--shuffle", "2"]


def _ckpt(tmp_path, **cfg):
    model = build_model(ModelConfig(**{**dict(channels=4, blocks=2, heads=2, shuffle=8), **cfg}))
    return save_checkpoint(model, None, 0, tmp_path / "m.ckpt")


def test_precedence_flag_file_default(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  channels: 8\n  blocks: 3\ntrain:\n  lr_init: 0.002\n  total_steps: 7\n")
    args = build_parser().parse_args(["train", "--config", str(cfg), "--channels", "4", "--heads", "2",
                                      "--steps", "9"])
    m, t, l = configs_from_args(args)
    assert m.channels == 4          # flag beats file
    assert m.blocks == 3            # file beats default
    assert m.shuffle == 8           # built-in default
    assert t.total_steps == 9 and t.lr_init == 0.002 and l.alpha_sr == 0.5


def test_preset_sits_below_file(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  lr_init: 0.001\n")
    args = build_parser().parse_args(["train", "--overfit-synthetic", "--config", str(cfg)])
    _, t, _ = configs_from_args(args, {"train": {"lr_init": 5e-3, "total_steps": 500}})
    assert t.lr_init == 0.001 and t.total_steps == 500


def test_bad_config_file_exit_1(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  chanels: 8\n")
    assert main(["ablate", "--config", str(cfg)]) == 1
    assert "chanels" in capsys.readouterr().err


def test_unknown_flag_exit_2():
    with pytest.raises(SystemExit) as e:
        main(["train", "--no-such-flag"])
    assert e.value.code == 2


def test_help_lists_flags():
    out = subprocess.run([sys.executable, "-m", "uhdpromer", "train", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for flag in ("--channels", "--blocks", "--heads", "--shuffle", "--beta", "--variant", "--config", "--steps",
                 "--lr", "--resume", "--overfit-synthetic", "--alpha-sr", "--lambda-freq", "--data-root"):
        assert flag in out.stdout
    for sub in ("infer", "eval", "ablate", "profile", "dump-ndp"):
        r = subprocess.run([sys.executable, "-m", "uhdpromer", sub, "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "usage" in r.stdout


def test_missing_dataset_exit_1(tmp_path, capsys):
    assert main(["train", *SMALL, "--steps", "1", "--out", str(tmp_path)]) == 1
    assert "data_root" in capsys.readouterr().err
    assert main(["train", *SMALL, "--steps", "1", "--data-root", str(tmp_path / "nope"),
                 "--out", str(tmp_path)]) == 1


def test_train_variant_a_one_step(tmp_path, capsys):
    rc = main(["train", *SMALL, "--variant", "a", "--overfit-synthetic", "--steps", "1", "--patch-size", "16",
               "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "final PSNR" in out
    assert (tmp_path / "loss_curve.png").exists() and (tmp_path / "last.ckpt").exists()


def test_train_on_directory_dataset(tmp_path):
    root = tmp_path / "data"
    for sub in ("input", "gt"):
        (root / sub).mkdir(parents=True)
    g = np.random.default_rng(0)
    for i in range(2):
        img = g.random((3, 20, 20), dtype=np.float32)
        save_image(img * 0.5, root / "input" / f"{i}.png")
        save_image(img, root / "gt" / f"{i}.png")
    assert main(["train", *SMALL, "--data-root", str(root), "--steps", "2", "--patch-size", "8",
                 "--out", str(tmp_path / "run")]) == 0


def test_infer_identity_and_sizes(tmp_path, capsys):
    ck = _ckpt(tmp_path, shuffle=8)
    inp = tmp_path / "in"
    inp.mkdir()
    g = np.random.default_rng(1)
    arr = (g.random((1000, 1000, 3)) * 255).astype(np.uint8)
    Image.fromarray(arr).save(inp / "big.png")
    Image.fromarray(arr[:64, :48]).save(inp / "small.jpg")
    (inp / "notes.txt").write_text("ignored")
    assert main(["infer", "--checkpoint", str(ck), "--input", str(inp), "--output", str(tmp_path / "out"),
                 "--save-sr"]) == 0
    out = np.asarray(Image.open(tmp_path / "out" / "big.png"))
    assert out.shape == (1000, 1000, 3) and np.array_equal(out, arr)
    assert (tmp_path / "out" / "small.png").exists() and (tmp_path / "out" / "sr" / "big.png").exists()


def test_infer_bad_file_nonzero(tmp_path, caplog):
    ck = _ckpt(tmp_path)
    inp = tmp_path / "in"
    inp.mkdir()
    (inp / "broken.png").write_bytes(b"not a png")
    save_image(np.zeros((3, 16, 16), np.float32), inp / "ok.png")
    assert main(["infer", "--checkpoint", str(ck), "--input", str(inp), "--output", str(tmp_path / "o")]) == 1
    assert (tmp_path / "o" / "ok.png").exists()
    assert "broken.png" in caplog.text


def test_infer_corrupt_checkpoint_exit_1(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage" * 10)
    assert main(["infer", "--checkpoint", str(bad), "--input", str(tmp_path), "--output", str(tmp_path)]) == 1


def test_eval_identical_dirs(tmp_path, capsys):
    for d in ("p", "g"):
        (tmp_path / d).mkdir()
        for i in range(3):
            save_image(np.full((3, 16, 16), i / 3, np.float32), tmp_path / d / f"{i}.png")
    assert main(["eval", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g"), "--out",
                 str(tmp_path / "ev")]) == 0
    out = capsys.readouterr().out
    assert "mean_psnr: inf" in out and "mean_ssim: 1.000000" in out
    assert len((tmp_path / "ev" / "metrics.csv").read_text().splitlines()) == 4
    assert (tmp_path / "ev" / "metrics.png").exists()


def test_ablate_table(tmp_path, capsys):
    assert main(["ablate", *SMALL, "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "d == full params: PASS" in out and "a == e params: PASS" in out
    for v, ref in REFERENCE_VARIANT_PARAMS.items():
        line = next(l for l in out.splitlines() if l.startswith(v + " "))
        assert ref in line and "ok" in line
    assert (tmp_path / "params.png").exists()


def test_profile_small(tmp_path, capsys):
    assert main(["profile", *SMALL, "--sizes", "16,32", "--reps", "1", "--warmup", "0",
                 "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "0.7430M" in out and "ratio 32^2 / 16^2 = 4.0000" in out
    assert (tmp_path / "flops_16x16.txt").exists() and (tmp_path / "flops.png").exists()
    assert main(["profile", *SMALL, "--sizes", "16,x", "--out", str(tmp_path)]) == 1


def test_dump_ndp(tmp_path, capsys):
    ck = _ckpt(tmp_path, shuffle=2)
    img = tmp_path / "im.png"
    save_image(np.random.default_rng(0).random((3, 16, 16)).astype(np.float32), img)
    assert main(["dump-ndp", "--checkpoint", str(ck), "--image", str(img), "--out", str(tmp_path / "n")]) == 0
    files = sorted(p.name for p in (tmp_path / "n").glob("ndp_block*.png"))
    assert files == ["ndp_block00.png", "ndp_block01.png"]
    assert Image.open(tmp_path / "n" / files[0]).size == (8, 8)
    ck_a = save_checkpoint(build_model(ModelConfig(channels=4, blocks=2, heads=2, shuffle=2, variant="a")),
                           None, 0, tmp_path / "a.ckpt")
    assert main(["dump-ndp", "--checkpoint", str(ck_a), "--image", str(img), "--out", str(tmp_path / "na")]) == 1


def test_commands_deterministic(tmp_path, capsys):
    for d in ("r1", "r2"):
        main(["train", *SMALL, "--overfit-synthetic", "--steps", "2", "--patch-size", "16",
              "--out", str(tmp_path / d)])
    assert (tmp_path / "r1" / "train_log.csv").read_text() == (tmp_path / "r2" / "train_log.csv").read_text()
