import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dualsynth.cli import (
    EXIT_CHECKPOINT,
    EXIT_EMPTY_REGION,
    EXIT_INPUT,
    EXIT_OK,
    EXIT_PHANTOM,
    EXIT_SHAPE,
    EXIT_USAGE,
    main,
)
from dualsynth.data import PhantomSpec, Volume, load_volume, save_phantom_spec, save_volume
from dualsynth.metrics import read_pgm

TINY_NETS = {"gen_depth": 2, "gen_base_channels": 2, "d1_widths": [2, 2, 2], "d1_conv_width": 4,
             "d1_fc_widths": [4], "d2_widths": [2, 2, 2], "batch_size": 4}


@pytest.fixture
def small_spec(tmp_path):
    p = str(tmp_path / "spec.json")
    save_phantom_spec(PhantomSpec(shape=(16, 32, 32), lesion_radius=(3.0, 5.0)), p)
    return p


@pytest.fixture
def tiny_config(tmp_path):
    p = str(tmp_path / "tiny.json")
    json.dump(TINY_NETS, open(p, "w"))
    return p


def _files(d):
    return {f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d))}


def test_gen_data_deterministic(tmp_path, small_spec):
    for name in ("a", "b"):
        assert main(["gen-data", "--seed", "7", "--spec", small_spec, "--out", str(tmp_path / name)]) == EXIT_OK
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) == {"source.json", "source.raw", "target.json", "target.raw", "mask.json", "mask.raw",
                      "phantom.json"}
    assert a == b
    assert json.load(open(tmp_path / "a" / "phantom.json"))["seed"] == 7


def test_eval_lesion_identical(tmp_path, small_spec, capsys):
    d = str(tmp_path / "d")
    main(["gen-data", "--seed", "1", "--spec", small_spec, "--out", d])
    ref = os.path.join(d, "target")
    out = str(tmp_path / "report.txt")
    assert main(["eval", "--reference", ref, "--estimate", ref, "--mask", "lesion", "--out", out]) == EXIT_OK
    text = capsys.readouterr().out
    assert "masked MAE:  0.000000" in text and "MAE:  0.000000" in text and "inf" in text
    rep = json.load(open(tmp_path / "report.json"))
    assert rep["masked_mae"] == 0.0 and rep["masked_psnr"] == "inf" and rep["masked_voxels"] > 0


def test_train_synth_eval_confidence(tmp_path, small_spec, tiny_config):
    d, run = str(tmp_path / "d"), str(tmp_path / "run")
    main(["gen-data", "--seed", "2", "--spec", small_spec, "--out", d])
    assert main(["train", "--data", d, "--config", tiny_config, "--mode", "dual_attention", "--epochs", "1",
                 "--seed", "1", "--patches", "16", "--patch-hw", "16", "--out", run]) == EXIT_OK
    recs = [json.loads(line) for line in open(os.path.join(run, "log.jsonl"))]
    assert [r["epoch"] for r in recs] == [0, 1]
    assert all(np.isfinite(v) for r in recs for v in r.values() if isinstance(v, float))
    ck = os.path.join(run, "model.ckpt")
    syn = str(tmp_path / "syn")
    assert main(["synth", "--checkpoint", ck, "--source", os.path.join(d, "source"), "--out", syn,
                 "--stride", "8"]) == EXIT_OK
    vol = load_volume(syn)
    assert vol.shape == (16, 32, 32) and np.isfinite(vol.voxels).all()
    assert main(["eval", "--reference", os.path.join(d, "target"), "--estimate", syn, "--mask", "lesion"]) == EXIT_OK
    conf = str(tmp_path / "conf")
    assert main(["inspect-confidence", "--checkpoint", ck, "--source", os.path.join(d, "source"),
                 "--slices", "0", "8", "--out", conf]) == EXIT_OK
    assert sorted(os.listdir(conf)) == ["confidence_z000.pgm", "confidence_z008.pgm"]
    assert read_pgm(os.path.join(conf, "confidence_z008.pgm")).shape == (32, 32)


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["eval", "--bogus"])
    assert e.value.code == EXIT_USAGE


def test_exit_codes_distinct():
    from dualsynth import cli

    codes = [v for k, v in vars(cli).items() if k.startswith("EXIT_")]
    assert len(codes) == len(set(codes))


def test_missing_input(tmp_path, capsys):
    code = main(["eval", "--reference", str(tmp_path / "nope"), "--estimate", str(tmp_path / "nope")])
    assert code == EXIT_INPUT
    assert "dualsynth eval" in capsys.readouterr().err


def test_bad_checkpoint(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"garbage!" * 10)
    save_volume(Volume(np.zeros((6, 16, 16), np.float32) + np.arange(16)), str(tmp_path / "s"))
    assert main(["synth", "--checkpoint", str(bad), "--source", str(tmp_path / "s"),
                 "--out", str(tmp_path / "o")]) == EXIT_CHECKPOINT


def test_empty_mask(tmp_path):
    v = Volume(np.arange(24, dtype=np.float32).reshape(2, 3, 4))
    save_volume(v, str(tmp_path / "a"))
    save_volume(Volume(np.zeros((2, 3, 4), np.float32)), str(tmp_path / "m"))
    assert main(["eval", "--reference", str(tmp_path / "a"), "--estimate", str(tmp_path / "a"),
                 "--mask", str(tmp_path / "m")]) == EXIT_EMPTY_REGION


def test_too_few_slices(tmp_path, tiny_config):
    for i, n in enumerate(("source", "target")):
        v = np.random.default_rng(i).random((4, 32, 32)).astype(np.float32)
        save_volume(Volume(v), str(tmp_path / "d" / n))
    assert main(["train", "--data", str(tmp_path / "d"), "--config", tiny_config, "--epochs", "0",
                 "--patch-hw", "16", "--out", str(tmp_path / "r")]) == EXIT_SHAPE


def test_phantom_failure(tmp_path):
    p = str(tmp_path / "spec.json")
    save_phantom_spec(PhantomSpec(shape=(16, 16, 16), lesion_count=40, lesion_radius=(5.0, 6.0), max_retries=20), p)
    assert main(["gen-data", "--spec", p, "--out", str(tmp_path / "o")]) == EXIT_PHANTOM


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "dualsynth.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "train", "synth", "eval", "inspect-confidence", "gradcheck", "ablate"):
        assert cmd in out.stdout
