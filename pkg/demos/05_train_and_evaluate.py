"""
Train, synthesize, score
========================

A short run at reduced size so it finishes in a few minutes on one core:
32x32 patches, two epochs. The full-size run is the same call with
patch_hw=64 and epochs=20.
"""
import os
import tempfile

import numpy as np

from dualsynth import autodiff as ad
from dualsynth.data import PhantomSpec, generate_phantom, make_dataset, normalize_intensity, synthesize_volume
from dualsynth.metrics import export_confidence, metrics_report
from dualsynth.networks import d2_forward
from dualsynth.trainer import TrainConfig, load_checkpoint, predict, run_training, save_checkpoint

data = make_dataset(PhantomSpec(seed=0), count=200, patch_hw=32, seed=0)
config = TrainConfig(mode="dual_attention", epochs=2, seed=0)
result = run_training(data, config)
for rec in result.log:
    print({k: round(v, 4) for k, v in rec.items() if k in ("epoch", "g_recon", "d1_loss", "d2_loss", "val_psnr")})

nets = result.checkpoint.nets

# score on a phantom the model never saw
src, tgt, mask = generate_phantom(PhantomSpec(seed=1000))
out = synthesize_volume(nets.g, normalize_intensity(src), patch_hw=32, stride=16)
print(metrics_report(normalize_intensity(tgt), out, mask).to_text())

with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "model.ckpt")
    save_checkpoint(result.checkpoint, path)
    back = load_checkpoint(path)
    print("checkpoint epoch", back.epoch, "size", os.path.getsize(path), "bytes")

    # the local discriminator's confidence on a synthesized slice, as an 8-bit PGM
    stack = normalize_intensity(src).voxels[6:11, :32, :32][None]
    with ad.no_grad():
        conf = d2_forward(nets.d2.eval(), predict(nets.g, stack), update_sn=False).data[0, 0]
    q = export_confidence(conf, os.path.join(d, "confidence.pgm"))
    lesion = mask.voxels[8, :32, :32].astype(bool)
    print("confidence mean", conf.mean().round(3), "grey levels", q.min(), "to", q.max(),
          "| inside lesion", conf[lesion].mean().round(3) if lesion.any() else "n/a")
