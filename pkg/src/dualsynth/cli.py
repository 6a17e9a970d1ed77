"""Command-line entry points: ``dualsynth <command> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from .data import (
    ConfigurationError,
    InsufficientSlicesError,
    PatchDataset,
    PhantomError,
    PhantomSpec,
    VolumeFormatError,
    denormalize_intensity,
    extract_patches,
    generate_phantom,
    load_phantom_spec,
    load_volume,
    normalize_intensity,
    save_phantom_spec,
    save_volume,
    synthesize_volume,
)
from .metrics import EmptyRegionError, export_confidence, metrics_report

# exit statuses; argparse itself exits with 2 on usage errors
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_SHAPE = 4
EXIT_CHECKPOINT = 5
EXIT_NONFINITE = 6
EXIT_GRADCHECK = 7
EXIT_GATING = 8
EXIT_EMPTY_REGION = 9
EXIT_PHANTOM = 10

FULL_SHAPE = (144, 144, 144)
log = logging.getLogger("dualsynth")


def _phantom_spec(args) -> PhantomSpec:
    spec = load_phantom_spec(args.spec) if getattr(args, "spec", None) else PhantomSpec()
    spec.seed = args.seed
    if getattr(args, "full_scale", False):
        spec.shape = FULL_SHAPE
    return spec


def _data_volumes(args):
    """Source, target and lesion mask from ``--data`` or a fresh phantom."""
    if args.data:
        src = load_volume(os.path.join(args.data, "source"))
        tgt = load_volume(os.path.join(args.data, "target"))
        mask_path = os.path.join(args.data, "mask.json")
        mask = load_volume(mask_path) if os.path.exists(mask_path) else None
        return src, tgt, mask
    return generate_phantom(_phantom_spec(args))


def cmd_gen_data(args) -> int:
    spec = _phantom_spec(args)
    src, tgt, mask = generate_phantom(spec)
    os.makedirs(args.out, exist_ok=True)
    save_volume(src, os.path.join(args.out, "source"))
    save_volume(tgt, os.path.join(args.out, "target"))
    save_volume(mask, os.path.join(args.out, "mask"))
    save_phantom_spec(spec, os.path.join(args.out, "phantom.json"))
    print(f"wrote phantom {spec.shape} seed {spec.seed} to {args.out} "
          f"({int(mask.voxels.sum())} lesion voxels)")
    return EXIT_OK


def _train_config(args):
    from .trainer import TrainConfig

    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    for key in ("mode", "epochs", "seed", "batch_size", "lr_g", "lr_d1", "lr_d2"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    if args.beta is not None or args.p is not None:
        w = dict(raw.get("weights", {}))
        if args.beta is not None:
            w["beta"] = args.beta
        if args.p is not None:
            w["p"] = args.p
        raw["weights"] = w
    return TrainConfig.from_dict(raw)


def cmd_train(args) -> int:
    from .trainer import run_training, save_checkpoint

    config = _train_config(args)
    src, tgt, mask = _data_volumes(args)
    src_n, tgt_n = normalize_intensity(src), normalize_intensity(tgt)
    pairs = extract_patches(src_n, tgt_n, args.patches, args.patch_hw, np.random.default_rng(config.seed), mask=mask)
    dataset = PatchDataset.from_pairs(pairs)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "model.ckpt")
    log_path = os.path.join(args.out, "log.jsonl")
    res = run_training(dataset, config, log_path=log_path, checkpoint_path=ckpt_path)
    res.checkpoint.extra = {"target_range": list(tgt_n.original_range), "patch_hw": args.patch_hw}
    save_checkpoint(res.checkpoint, ckpt_path)
    first, last = res.log[0], res.log[-1]
    if "val_psnr" in last:
        print(f"validation PSNR {first['val_psnr']:.2f} -> {last['val_psnr']:.2f} dB "
              f"after {last['epoch']} epochs")
    print(f"checkpoint: {ckpt_path}\nlog: {log_path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    src = load_volume(args.source)
    patch_hw = args.patch_hw or ckpt.extra.get("patch_hw", 64)
    out = synthesize_volume(ckpt.nets.g, normalize_intensity(src), patch_hw, args.stride)
    rng = ckpt.extra.get("target_range")
    if rng is not None and not args.normalized:
        out = denormalize_intensity(out, tuple(rng))
    out.modality_tag = "synthetic"
    save_volume(out, args.out)
    print(f"wrote {out.shape} synthetic volume to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ref = load_volume(args.reference)
    est = load_volume(args.estimate)
    if args.normalize_reference:
        ref = normalize_intensity(ref)
    mask = None
    if args.mask == "lesion":
        mask = load_volume(os.path.join(os.path.dirname(os.path.abspath(args.reference)), "mask"))
    elif args.mask:
        mask = load_volume(args.mask)
    rep = metrics_report(ref, est, mask, peak=args.peak)
    text = rep.to_text()
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        base = args.out.rsplit(".", 1)[0] if "." in os.path.basename(args.out) else args.out
        with open(base + ".json", "w") as fh:
            json.dump(rep.to_dict(), fh, indent=2)
    return EXIT_OK


def cmd_inspect_confidence(args) -> int:
    from .networks import d2_forward
    from .trainer import load_checkpoint, predict

    ckpt = load_checkpoint(args.checkpoint)
    src = normalize_intensity(load_volume(args.source))
    d = src.depth
    slices = args.slices if args.slices else [d // 2]
    os.makedirs(args.out, exist_ok=True)
    idx = np.arange(-2, 3)
    stacks = np.stack([src.voxels[np.clip(z + idx, 0, d - 1)] for z in slices])
    synth = predict(ckpt.nets.g, stacks)
    with ad.no_grad():
        m = d2_forward(ckpt.nets.d2.eval(), synth.astype(ckpt.nets.d2.dtype), update_sn=False).data
    for z, conf in zip(slices, m[:, 0]):
        path = os.path.join(args.out, f"confidence_z{z:03d}.pgm")
        export_confidence(conf, path)
        print(f"slice {z}: mean confidence {conf.mean():.3f} -> {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    reports = run_suite(seed=args.seed, verbose=True)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import load_ablation_config, run_ablation

    cfg = load_ablation_config(args.config)

    def progress(run):
        r = run.report
        print(f"{run.mode:15s} seed {run.seed}: MAE {r.mae:.4f} PSNR {r.psnr:.2f} "
              f"lesion MAE {r.masked_mae:.4f} lesion PSNR {r.masked_psnr:.2f}", flush=True)

    _, table = run_ablation(cfg, args.out, verify_gating=not args.no_gating_check, progress=progress)
    sys.stdout.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualsynth", description="Cross-modality synthesis with dual discriminators.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen-data", help="write a seeded phantom (source, target, lesion mask)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--spec", help="phantom spec JSON file")
    g.add_argument("--full-scale", action="store_true", help="144^3 volumes")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a phantom directory or a freshly generated phantom")
    t.add_argument("--data", help="directory written by gen-data (default: generate from --seed)")
    t.add_argument("--spec", help="phantom spec JSON used when --data is absent")
    t.add_argument("--full-scale", action="store_true")
    t.add_argument("--config", help="training config JSON; flags below override it")
    t.add_argument("--mode", choices=("unet_only", "global_only", "local_only", "dual", "dual_attention"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-g", type=float)
    t.add_argument("--lr-d1", type=float)
    t.add_argument("--lr-d2", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--p", type=int, choices=(1, 2))
    t.add_argument("--patches", type=int, default=300)
    t.add_argument("--patch-hw", type=int, default=64)
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="apply a checkpoint's generator to a source volume")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--patch-hw", type=int)
    s.add_argument("--stride", type=int, default=32)
    s.add_argument("--normalized", action="store_true", help="keep the [-1, 1] output scale")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="MAE/PSNR of an estimate against a reference volume")
    e.add_argument("--reference", required=True)
    e.add_argument("--estimate", required=True)
    e.add_argument("--mask", help="mask volume path, or 'lesion' for the mask next to the reference")
    e.add_argument("--peak", type=float, help="fixed PSNR peak (default: reference data range)")
    e.add_argument("--normalize-reference", action="store_true", help="map the reference to [-1, 1] first")
    e.add_argument("--out", help="report text file; a .json twin is written next to it")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("inspect-confidence", help="export local-discriminator confidence maps as PGM")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--source", required=True)
    c.add_argument("--slices", type=int, nargs="*")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_inspect_confidence)

    k = sub.add_parser("gradcheck", help="finite-difference checks of every operator and loss")
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train all modes from one config and write a results table")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--no-gating-check", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    from .autodiff import ContractError, DimensionError
    from .trainer import CheckpointError, GatingError, NonFiniteError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    errors = [
        (CheckpointError, EXIT_CHECKPOINT),
        (NonFiniteError, EXIT_NONFINITE),
        (GatingError, EXIT_GATING),
        (EmptyRegionError, EXIT_EMPTY_REGION),
        (PhantomError, EXIT_PHANTOM),
        ((DimensionError, InsufficientSlicesError), EXIT_SHAPE),
        ((VolumeFormatError, ConfigurationError, ContractError, FileNotFoundError, json.JSONDecodeError,
          ValueError, TypeError, KeyError), EXIT_INPUT),
    ]
    try:
        return args.func(args)
    except Exception as exc:  # map to a distinct status per failure class
        for kinds, code in errors:
            if isinstance(exc, kinds):
                print(f"dualsynth {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
