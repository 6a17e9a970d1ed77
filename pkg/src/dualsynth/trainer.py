"""Alternating optimization of the generator and the two discriminators."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PatchDataset
from .losses import (
    LossWeights,
    attention_recon_loss,
    attention_weights,
    critic_loss_d1,
    d2_loss,
    gen_adv1,
    gen_adv2,
    recon_loss,
    total_gen_loss,
)
from .metrics import mae as mae_metric, psnr as psnr_metric
from .networks import (
    GeneratorNet,
    GlobalDiscriminator,
    LocalDiscriminator,
    Network,
    build_generator,
    build_global_discriminator,
    build_local_discriminator,
    d2_forward,
    generator_forward,
)

log = logging.getLogger(__name__)

MODES = ("unet_only", "global_only", "local_only", "dual", "dual_attention")

__all__ = [
    "MODES",
    "TrainConfig",
    "AdamState",
    "Nets",
    "Checkpoint",
    "CheckpointError",
    "NonFiniteError",
    "GatingError",
    "check_gating",
    "adam_step",
    "scheduled_lr",
    "build_nets",
    "train_step_discriminators",
    "train_step_generator",
    "run_training",
    "save_checkpoint",
    "load_checkpoint",
    "param_digest",
    "predict",
    "evaluate",
    "split_dataset",
    "TrainingResult",
]


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class GatingError(AssertionError):
    """A training step changed parameters that its mode must leave alone."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, from another format version, or from another config."""


@dataclass
class TrainConfig:
    mode: str = "dual"
    weights: LossWeights = field(default_factory=LossWeights)
    lr_g: float = 5e-3
    lr_d1: float = 1e-4
    lr_d2: float = 1e-3
    decay_g: float = 0.5
    decay_d: float = 0.2
    decay_period: int = 2
    batch_size: int = 10
    epochs: int = 20
    seed: int = 0
    precision: str = "train"
    d_steps: int = 1
    g_steps: int = 1
    val_fraction: float = 0.1
    gen_depth: int = 3
    gen_base_channels: int = 16
    gen_norm: str = "batch"
    gen_output: str = "tanh"
    d1_widths: tuple = (32, 64, 128)
    d1_conv_width: int = 256
    d1_fc_widths: tuple = (512, 128)
    d1_norm: str = "none"
    d2_widths: tuple = (32, 64, 128)
    spectral_norm: bool = True
    psnr_peak: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.d1_widths = tuple(self.d1_widths)
        self.d1_fc_widths = tuple(self.d1_fc_widths)
        self.d2_widths = tuple(self.d2_widths)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.lr_g, self.lr_d1, self.lr_d2) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.precision not in ("train", "verify"):
            raise ValueError(f"precision must be 'train' or 'verify', got {self.precision!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    @property
    def uses_d1(self) -> bool:
        return self.mode in ("global_only", "dual", "dual_attention")

    @property
    def uses_d2(self) -> bool:
        return self.mode in ("local_only", "dual", "dual_attention")

    @property
    def dtype(self):
        return np.float32 if self.precision == "train" else np.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        d["d1_widths"] = list(self.d1_widths)
        d["d1_fc_widths"] = list(self.d1_fc_widths)
        d["d2_widths"] = list(self.d2_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)

    def digest(self) -> str:
        """Hash of the architecture-relevant settings (mode and schedules excluded)."""
        keys = ("precision", "gen_depth", "gen_base_channels", "gen_norm", "gen_output", "d1_widths",
                "d1_conv_width", "d1_fc_widths", "d1_norm", "d2_widths", "spectral_norm")
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update applied in place to ``params`` (name -> Tensor).

    ``grads`` maps the same names to arrays. Returns ``params``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r} "
                                 f"(nan={int(np.isnan(g).sum())}, inf={int(np.isinf(g).sum())})")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ad.DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return params


def scheduled_lr(base: float, epoch: int, factor: float, period: int = 2) -> float:
    """Step decay: ``base * factor ** (epoch // period)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * factor ** (epoch // period)


# ---------------------------------------------------------------------------
# networks bundle


@dataclass
class Nets:
    g: GeneratorNet
    d1: GlobalDiscriminator
    d2: LocalDiscriminator
    opt_g: AdamState = field(default_factory=AdamState)
    opt_d1: AdamState = field(default_factory=AdamState)
    opt_d2: AdamState = field(default_factory=AdamState)


def build_nets(config: TrainConfig, patch_hw: int = 64, seed: Optional[int] = None) -> Nets:
    seed = config.seed if seed is None else seed
    ss = np.random.SeedSequence(seed).spawn(3)
    s = [int(x.generate_state(1)[0]) for x in ss]
    dt = config.dtype
    g = build_generator(config.gen_depth, config.gen_base_channels, config.gen_norm, s[0], dt,
                        output=config.gen_output)
    d1 = build_global_discriminator(patch_hw, widths=config.d1_widths, conv_width=config.d1_conv_width,
                                    fc_widths=config.d1_fc_widths, norm_kind=config.d1_norm,
                                    spectral_norm=config.spectral_norm, seed=s[1], dtype=dt)
    d2 = build_local_discriminator(widths=config.d2_widths, spectral_norm=config.spectral_norm, seed=s[2], dtype=dt)
    return Nets(g, d1, d2)


def param_digest(net: Network) -> str:
    h = hashlib.sha256()
    for name, p in sorted(net.parameters().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _digests(nets: Nets) -> dict:
    return {"g": param_digest(nets.g), "d1": param_digest(nets.d1), "d2": param_digest(nets.d2)}


def check_gating(phase: str, before: dict, after: dict, config: TrainConfig) -> None:
    """Raise :class:`GatingError` unless exactly the networks ``phase`` may update changed.

    ``before``/``after`` are parameter digests keyed ``g``, ``d1``, ``d2``.
    A network that may change is not required to (a zero gradient is legal).
    """
    if phase == "discriminators":
        frozen = ["g"] + [k for k, used in (("d1", config.uses_d1), ("d2", config.uses_d2)) if not used]
    elif phase == "generator":
        frozen = ["d1", "d2"]
    else:
        raise ValueError(f"unknown phase {phase!r}")
    moved = [k for k in frozen if before[k] != after[k]]
    if moved:
        raise GatingError(f"{phase} step in mode {config.mode!r} changed parameters of {', '.join(moved)}")


def _grads_by_name(gm: ad.GradMap, params: dict) -> dict:
    return {name: gm[p] for name, p in params.items()}


# ---------------------------------------------------------------------------
# steps


def train_step_discriminators(batch: PatchDataset, nets: Nets, config: TrainConfig, lrs: dict,
                              rng: np.random.Generator) -> dict:
    """One update of D1 and/or D2 on a single batch of generated and real targets.

    Returns the loss values (NaN for discriminators the mode leaves untouched).
    """
    out = {"d1_loss": math.nan, "d2_loss": math.nan}
    if not (config.uses_d1 or config.uses_d2):
        return out
    dt = config.dtype
    with ad.no_grad():
        g_x = generator_forward(nets.g, batch.source.astype(dt)).data
    y = batch.target.astype(dt)
    if config.uses_d1:
        loss = critic_loss_d1(nets.d1, y, g_x, config.weights.lambda_gp, rng)
        _check_finite("d1_loss", loss)
        params = nets.d1.parameters()
        adam_step(params, _grads_by_name(ad.backward(loss), params), nets.opt_d1, lrs["d1"])
        out["d1_loss"] = loss.item()
    if config.uses_d2:
        loss = d2_loss(nets.d2, y, g_x, config.weights.reduction)
        _check_finite("d2_loss", loss)
        params = nets.d2.parameters()
        adam_step(params, _grads_by_name(ad.backward(loss), params), nets.opt_d2, lrs["d2"])
        out["d2_loss"] = loss.item()
    return out


def generator_losses(batch: PatchDataset, nets: Nets, config: TrainConfig):
    """Forward pass of the generator objective for ``config.mode``.

    Returns ``(total, parts)`` where ``parts`` holds the component tensors.
    """
    dt = config.dtype
    w = config.weights
    g_x = generator_forward(nets.g, batch.source.astype(dt))
    y = batch.target.astype(dt)
    parts = {"recon": recon_loss(y, g_x, w.p)}
    att = parts["recon"]
    if config.mode == "dual_attention":
        with ad.no_grad():
            m = d2_forward(nets.d2, g_x.data, update_sn=False).data
        att = attention_recon_loss(y, g_x, attention_weights(m, w.beta), w.p)
        parts["attention"] = att
    # power iterations only advance during discriminator updates
    adv1 = gen_adv1(nets.d1, g_x, update_sn=False) if config.uses_d1 else None
    adv2 = gen_adv2(nets.d2, g_x, w.reduction, update_sn=False) if config.uses_d2 else None
    if adv1 is not None:
        parts["adv1"] = adv1
    if adv2 is not None:
        parts["adv2"] = adv2
    return total_gen_loss(att, adv1, adv2, w), parts


def train_step_generator(batch: PatchDataset, nets: Nets, config: TrainConfig, lrs: dict) -> dict:
    """One generator update; returns the loss breakdown as floats."""
    total, parts = generator_losses(batch, nets, config)
    _check_finite("g_loss", total)
    params = nets.g.parameters()
    gm = ad.backward(total)
    adam_step(params, _grads_by_name(gm, params), nets.opt_g, lrs["g"])
    out = {f"g_{k}": v.item() for k, v in parts.items()}
    out["g_total"] = total.item()
    return out


def recompose_total(breakdown: dict, w: LossWeights) -> float:
    att = breakdown.get("g_attention", breakdown["g_recon"])
    return att + w.lambda1 * breakdown.get("g_adv1", 0.0) + w.lambda2 * breakdown.get("g_adv2", 0.0)


def _check_finite(name, t: Tensor):
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{name} is not finite ({t.data})")


# ---------------------------------------------------------------------------
# evaluation during training


def predict(g: GeneratorNet, source: np.ndarray, batch_size: int = 10) -> np.ndarray:
    was = g.training
    g.eval()
    try:
        with ad.no_grad():
            outs = [generator_forward(g, source[i:i + batch_size].astype(g.dtype)).data
                    for i in range(0, len(source), batch_size)]
    finally:
        g.training = was
    return np.concatenate(outs)


def evaluate(g: GeneratorNet, data: PatchDataset, peak: Optional[float] = None) -> dict:
    pred = predict(g, data.source).astype(np.float64)
    y = data.target.astype(np.float64)
    rec = {"val_mae": mae_metric(y, pred), "val_psnr": psnr_metric(y, pred, peak=peak)}
    if data.mask is not None and data.mask.any():
        rec["val_masked_mae"] = mae_metric(y, pred, data.mask)
        rec["val_masked_psnr"] = psnr_metric(y, pred, data.mask, peak=peak)
    return rec


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Checkpoint:
    nets: Nets
    epoch: int
    config: TrainConfig
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


@dataclass
class TrainingResult:
    log: list
    checkpoint: Checkpoint
    val_indices: np.ndarray


def split_dataset(dataset: PatchDataset, val_fraction: float, seed: int):
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    if n_val >= n:
        n_val = n - 1
    return perm[n_val:], perm[:n_val]


def run_training(dataset: PatchDataset, config: TrainConfig, log_path: Optional[str] = None,
                 checkpoint_path: Optional[str] = None, nets: Optional[Nets] = None,
                 val_dataset: Optional[PatchDataset] = None, verify_gating: bool = False) -> TrainingResult:
    """Train for ``config.epochs`` epochs and return the per-epoch log and final checkpoint.

    Each iteration takes two consecutive mini-batches of the shuffled training
    split: the discriminators update on the first, the generator on the
    second. A held-out split (``val_fraction``) is evaluated before training
    (epoch 0) and after every epoch. ``verify_gating`` hashes all parameters
    around every step and raises :class:`GatingError` on a violation.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    patch_hw = dataset.source.shape[-1]
    nets = nets if nets is not None else build_nets(config, patch_hw)
    train_idx, val_idx = split_dataset(dataset, config.val_fraction, config.seed)
    train = dataset.subset(train_idx)
    val = val_dataset if val_dataset is not None else (dataset.subset(val_idx) if len(val_idx) else None)
    rng = np.random.default_rng(config.seed + 1)
    history = []
    log_fh = open(log_path, "w") if log_path else None

    def emit(rec):
        history.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

    last_good = Checkpoint(nets, 0, config, rng.bit_generator.state)
    try:
        rec = {"epoch": 0}
        if val is not None:
            rec.update(evaluate(nets.g, val, config.psnr_peak))
        emit(rec)
        bs = config.batch_size
        n_batches = max(len(train) // bs, 1)
        for epoch in range(config.epochs):
            t0 = time.time()
            lrs = {"g": scheduled_lr(config.lr_g, epoch, config.decay_g, config.decay_period),
                   "d1": scheduled_lr(config.lr_d1, epoch, config.decay_d, config.decay_period),
                   "d2": scheduled_lr(config.lr_d2, epoch, config.decay_d, config.decay_period)}
            order = rng.permutation(len(train))
            batches = [order[i * bs:(i + 1) * bs] for i in range(n_batches)]
            sums: dict[str, list] = {}
            for i in range(n_batches):
                d_batch = train.subset(batches[i])
                g_batch = train.subset(batches[(i + 1) % n_batches])
                for _ in range(config.d_steps):
                    before = _digests(nets) if verify_gating else None
                    for k, v in train_step_discriminators(d_batch, nets, config, lrs, rng).items():
                        sums.setdefault(k, []).append(v)
                    if verify_gating:
                        check_gating("discriminators", before, _digests(nets), config)
                for _ in range(config.g_steps):
                    before = _digests(nets) if verify_gating else None
                    for k, v in train_step_generator(g_batch, nets, config, lrs).items():
                        sums.setdefault(k, []).append(v)
                    if verify_gating:
                        check_gating("generator", before, _digests(nets), config)
            rec = {"epoch": epoch + 1, "lr_g": lrs["g"], "lr_d1": lrs["d1"], "lr_d2": lrs["d2"]}
            # sentinel NaNs from gated-off discriminators stay out of the log
            rec.update({k: float(np.mean(v)) for k, v in sums.items() if not all(map(math.isnan, v))})
            if val is not None:
                rec.update(evaluate(nets.g, val, config.psnr_peak))
            rec["seconds"] = time.time() - t0
            log.info("epoch %d: %s", epoch + 1, {k: round(v, 5) for k, v in rec.items() if isinstance(v, float)})
            emit(rec)
            last_good = Checkpoint(nets, epoch + 1, config, rng.bit_generator.state)
            if checkpoint_path:
                save_checkpoint(last_good, checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
    return TrainingResult(history, last_good, val_idx)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"DUALSYN\x00"
FORMAT_VERSION = 1


def _named_arrays(nets: Nets) -> dict:
    arrays = {}
    for tag, net in (("g", nets.g), ("d1", nets.d1), ("d2", nets.d2)):
        for name, p in net.parameters().items():
            arrays[f"{tag}/param/{name}"] = p.data
        for name, b in net.buffers().items():
            arrays[f"{tag}/buffer/{name}"] = b
    for tag, st in (("g", nets.opt_g), ("d1", nets.opt_d1), ("d2", nets.opt_d2)):
        for name in st.m:
            arrays[f"adam_{tag}/m/{name}"] = st.m[name]
            arrays[f"adam_{tag}/v/{name}"] = st.v[name]
    return arrays


def save_checkpoint(c: Checkpoint, path: str) -> None:
    """Binary checkpoint: magic, version, config digest, JSON metadata, named float32 tensors."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(bytes.fromhex(c.config.digest()))
    meta = {
        "epoch": c.epoch,
        "config": c.config.to_dict(),
        "rng_state": c.rng_state,
        "adam_t": {"g": c.nets.opt_g.t, "d1": c.nets.opt_d1.t, "d2": c.nets.opt_d2.t},
        "extra": c.extra,
    }
    mb = json.dumps(meta, sort_keys=True, default=int).encode()
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    arrays = _named_arrays(c.nets)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"checkpoint truncated: needed {n} bytes at offset {self.pos}, "
                                  f"file has {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str, expected_config: Optional[TrainConfig] = None) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    When ``expected_config`` is given its digest must match the stored one.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint file: magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    digest = r.take(32).hex()
    meta = json.loads(r.take(r.u32()).decode())
    config = TrainConfig.from_dict(meta["config"])
    if config.digest() != digest:
        raise CheckpointError(f"checkpoint metadata digest {config.digest()[:12]} disagrees with header {digest[:12]}")
    if expected_config is not None and expected_config.digest() != digest:
        raise CheckpointError(f"config digest mismatch: expected {expected_config.digest()[:12]}, found {digest[:12]}")
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
    if r.pos != len(r.raw):
        raise CheckpointError(f"checkpoint has {len(r.raw) - r.pos} trailing bytes")

    patch_hw = config_patch_hw(arrays, config)
    nets = build_nets(config, patch_hw)
    for tag, net in (("g", nets.g), ("d1", nets.d1), ("d2", nets.d2)):
        for name, p in net.parameters().items():
            key = f"{tag}/param/{name}"
            if key not in arrays or arrays[key].shape != p.shape:
                raise CheckpointError(f"checkpoint lacks or misshapes tensor {key!r}")
            p.data = arrays[key].astype(net.dtype)
        for name in net.buffers():
            net.set_buffer(name, arrays[f"{tag}/buffer/{name}"])
    for tag, st in (("g", nets.opt_g), ("d1", nets.opt_d1), ("d2", nets.opt_d2)):
        st.t = int(meta["adam_t"][tag])
        prefix = f"adam_{tag}/m/"
        for key in arrays:
            if key.startswith(prefix):
                name = key[len(prefix):]
                st.m[name] = arrays[key].astype(nets.g.dtype)
                st.v[name] = arrays[f"adam_{tag}/v/{name}"].astype(nets.g.dtype)
    return Checkpoint(nets, int(meta["epoch"]), config, meta.get("rng_state", {}), meta.get("extra", {}))


def config_patch_hw(arrays: dict, config: TrainConfig) -> int:
    """Recover the critic's input size from its first fully connected layer."""
    n_pool = len(config.d1_widths)
    fin = arrays["d1/param/fc0.weight"].shape[1] if config.d1_fc_widths else arrays["d1/param/head.weight"].shape[1]
    cells = fin // config.d1_conv_width
    side = int(round(math.sqrt(cells)))
    return side * 2 ** n_pool
