"""Run every training mode from one config file and tabulate the results."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .data import PhantomSpec, generate_phantom, make_dataset, normalize_intensity, synthesize_volume
from .metrics import MetricsReport, ablation_report, metrics_report
from .trainer import MODES, GatingError, TrainConfig, build_nets, param_digest, run_training

__all__ = ["AblationConfig", "AblationRun", "load_ablation_config", "run_ablation", "evaluate_on_phantom"]


@dataclass
class AblationConfig:
    phantom: dict = field(default_factory=dict)
    patches: int = 300
    patch_hw: int = 64
    stride: int = 32
    seeds: tuple = (0,)
    modes: tuple = MODES
    test_seed_offset: int = 1000
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.modes = tuple(self.modes)
        unknown = [m for m in self.modes if m not in MODES]
        if unknown:
            raise ValueError(f"unknown modes {unknown}; choose from {MODES}")
        for k in ("mode", "seed"):
            if k in self.train:
                raise ValueError(f"'train.{k}' is set per run by the harness")
        TrainConfig(**self.train)  # fail early on bad keys

    def train_config(self, mode: str, seed: int) -> TrainConfig:
        return TrainConfig(mode=mode, seed=seed, **self.train)

    def phantom_spec(self, seed: int) -> PhantomSpec:
        return PhantomSpec(**{**self.phantom, "seed": seed})


def load_ablation_config(path: str) -> AblationConfig:
    with open(path) as fh:
        return AblationConfig(**json.load(fh))


@dataclass
class AblationRun:
    mode: str
    seed: int
    report: MetricsReport
    digests_before: dict
    digests_after: dict
    final_val_psnr: Optional[float] = None

    @property
    def changed(self) -> dict:
        return {k: self.digests_before[k] != self.digests_after[k] for k in self.digests_before}


def evaluate_on_phantom(gen, spec: PhantomSpec, patch_hw: int, stride: int,
                        peak: Optional[float] = None) -> MetricsReport:
    """Synthesize a held-out phantom's target and score it, whole volume and lesion region."""
    src, tgt, mask = generate_phantom(spec)
    out = synthesize_volume(gen, normalize_intensity(src), patch_hw, stride)
    return metrics_report(normalize_intensity(tgt), out, mask, peak=peak)


def _digests(nets) -> dict:
    return {"g": param_digest(nets.g), "d1": param_digest(nets.d1), "d2": param_digest(nets.d2)}


def _expected_changes(mode: str) -> dict:
    cfg = TrainConfig(mode=mode)
    return {"g": True, "d1": cfg.uses_d1, "d2": cfg.uses_d2}


def run_ablation(cfg: AblationConfig, out_dir: Optional[str] = None, verify_gating: bool = True,
                 modes: Optional[Sequence[str]] = None, progress=None) -> tuple[list[AblationRun], str]:
    """Train every (seed, mode) pair on identical data and return runs plus the text table.

    Unused discriminators must leave training with the parameter digest they
    started with; with ``verify_gating`` every step is checked as well.
    """
    runs: list[AblationRun] = []
    modes = tuple(modes) if modes is not None else cfg.modes
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for seed in cfg.seeds:
        data = make_dataset(cfg.phantom_spec(seed), cfg.patches, cfg.patch_hw, seed)
        test_spec = cfg.phantom_spec(seed + cfg.test_seed_offset)
        for mode in modes:
            tc = cfg.train_config(mode, seed)
            nets = build_nets(tc, cfg.patch_hw)
            before = _digests(nets)
            run_dir = os.path.join(out_dir, f"{mode}_seed{seed}") if out_dir else None
            if run_dir:
                os.makedirs(run_dir, exist_ok=True)
            res = run_training(data, tc, nets=nets,
                               log_path=os.path.join(run_dir, "log.jsonl") if run_dir else None,
                               checkpoint_path=os.path.join(run_dir, "model.ckpt") if run_dir else None,
                               verify_gating=verify_gating)
            after = _digests(nets)
            for net_name, may_change in _expected_changes(mode).items():
                if not may_change and before[net_name] != after[net_name]:
                    raise GatingError(f"mode {mode!r} changed {net_name} parameters")
            rep = evaluate_on_phantom(nets.g, test_spec, cfg.patch_hw, cfg.stride, tc.psnr_peak)
            run = AblationRun(mode, seed, rep, before, after, res.log[-1].get("val_psnr"))
            runs.append(run)
            if progress:
                progress(run)
    table = ablation_report([(r.mode, r.report) for r in runs],
                            os.path.join(out_dir, "report.txt") if out_dir else None, masked=True)
    if out_dir:
        with open(os.path.join(out_dir, "runs.json"), "w") as fh:
            json.dump([{"mode": r.mode, "seed": r.seed, "metrics": r.report.to_dict(),
                        "changed": r.changed, "final_val_psnr": r.final_val_psnr} for r in runs], fh, indent=2)
    return runs, table
