import json
import os

import pytest

from dualsynth.ablation import AblationConfig, load_ablation_config, run_ablation
from dualsynth.cli import EXIT_OK, main
from dualsynth.trainer import MODES

TINY = {
    "phantom": {"shape": [16, 32, 32], "lesion_radius": [3.0, 5.0]},
    "patches": 12,
    "patch_hw": 16,
    "stride": 8,
    "seeds": [0],
    "train": {"epochs": 1, "batch_size": 4, "gen_depth": 2, "gen_base_channels": 2, "d1_widths": [2, 2, 2],
              "d1_conv_width": 4, "d1_fc_widths": [4], "d2_widths": [2, 2, 2]},
}


def test_config_validation():
    with pytest.raises(ValueError):
        AblationConfig(modes=("dual", "quad"))
    with pytest.raises(ValueError, match="train.mode"):
        AblationConfig(train={"mode": "dual"})
    with pytest.raises(TypeError):
        AblationConfig(train={"learning_rate": 1.0})


def test_all_modes_from_one_file(tmp_path):
    cfg_path = tmp_path / "ablate.json"
    cfg_path.write_text(json.dumps(TINY))
    runs, table = run_ablation(load_ablation_config(str(cfg_path)), str(tmp_path / "out"))
    assert [r.mode for r in runs] == list(MODES)
    expected = {"unet_only": (False, False), "global_only": (True, False), "local_only": (False, True),
                "dual": (True, True), "dual_attention": (True, True)}
    for r in runs:
        assert r.changed == {"g": True, "d1": expected[r.mode][0], "d2": expected[r.mode][1]}, r.mode
        assert r.report.masked_voxels > 0
    lines = table.splitlines()
    assert lines[0].split()[:3] == ["Method", "MAE", "PSNR"]
    assert [ln.split()[0] for ln in lines[2:7]] == list(MODES)
    out = tmp_path / "out"
    assert (out / "report.txt").read_text() == table
    assert len(json.load(open(out / "runs.json"))) == 5
    for m in MODES:
        assert os.path.exists(out / f"{m}_seed0" / "model.ckpt")


def test_ablate_command(tmp_path, capsys):
    cfg_path = tmp_path / "ablate.json"
    cfg_path.write_text(json.dumps({**TINY, "modes": ["unet_only", "local_only"]}))
    assert main(["ablate", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == EXIT_OK
    text = capsys.readouterr().out
    assert "unet_only" in text and "local_only" in text and "peak convention" in text
