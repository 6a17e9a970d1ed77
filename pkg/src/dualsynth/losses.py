"""Reconstruction, adversarial and attention-weighted objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .networks import GlobalDiscriminator, LocalDiscriminator, d1_forward, d2_forward

BCE_EPS = 1e-7

__all__ = [
    "BCE_EPS",
    "LossWeights",
    "InterpolationSample",
    "recon_loss",
    "interpolate",
    "critic_loss_d1",
    "gradient_penalty",
    "gen_adv1",
    "bce_map",
    "d2_loss",
    "gen_adv2",
    "attention_weights",
    "attention_recon_loss",
    "total_gen_loss",
]


@dataclass(frozen=True)
class LossWeights:
    lambda_gp: float = 10.0
    lambda1: float = 0.05
    lambda2: float = 0.1
    p: int = 1
    beta: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if min(self.lambda_gp, self.lambda1, self.lambda2) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.p not in (1, 2):
            raise ValueError(f"reconstruction exponent p must be 1 or 2, got {self.p}")
        if self.beta < 0:
            raise ValueError(f"attention exponent beta must be >= 0, got {self.beta}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


@dataclass
class InterpolationSample:
    x_hat: Tensor
    epsilon: np.ndarray


def _check_same(kind, a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{kind}: target shape {tuple(a.shape)} differs from prediction shape {tuple(b.shape)}")


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _error_power(y, g_x, p):
    d = ad.sub(y, g_x)
    return ad.abs_(d) if p == 1 else ad.mul(d, d)


def recon_loss(y, g_x, p: int = 1) -> Tensor:
    """Mean over voxels of ``|y - g_x| ** p``."""
    g_x = _t(g_x)
    y = _t(y, g_x)
    _check_same("recon_loss", y, g_x)
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    return ad.mean(_error_power(y, g_x, p))


def interpolate(y, g_x, rng: np.random.Generator, epsilon=None) -> InterpolationSample:
    """Random points on the segments between real and generated samples.

    One uniform draw per batch element; the mixed sample is a fresh leaf that
    requires a gradient.
    """
    y_d = y.data if isinstance(y, Tensor) else np.asarray(y)
    g_d = g_x.data if isinstance(g_x, Tensor) else np.asarray(g_x)
    if y_d.shape != g_d.shape:
        raise DimensionError(f"interpolate: real shape {y_d.shape} differs from generated shape {g_d.shape}")
    b = y_d.shape[0]
    if epsilon is None:
        epsilon = rng.uniform(0.0, 1.0, size=b)
    eps = np.asarray(epsilon, dtype=y_d.dtype).reshape((b,) + (1,) * (y_d.ndim - 1))
    x_hat = eps * y_d + (1 - eps) * g_d
    return InterpolationSample(Tensor(x_hat, requires_grad=True), np.asarray(epsilon).reshape(b))


def gradient_penalty(critic, x_hat: Tensor) -> Tensor:
    """Mean of ``(||d critic / d x_hat||_2 - 1) ** 2`` over the batch."""
    norms = ad.grad_norm_differentiable(critic(x_hat), x_hat)
    return ad.mean(ad.power(ad.sub(norms, 1.0), 2))


def critic_loss_d1(d1, y, g_x, lambda_gp: float, rng: np.random.Generator, return_parts: bool = False,
                   epsilon=None, update_sn: bool = True):
    """Wasserstein critic loss with gradient penalty.

    ``d1`` is a :class:`GlobalDiscriminator` or any callable mapping a batch
    to per-sample scores. ``g_x`` is detached here so the critic update never
    reaches the generator.
    """
    g_data = g_x.data if isinstance(g_x, Tensor) else np.asarray(g_x)
    y_data = y.data if isinstance(y, Tensor) else np.asarray(y)
    fake = Tensor(g_data)
    real = Tensor(y_data)
    if isinstance(d1, GlobalDiscriminator):
        weights = d1.effective_weights(update_sn)
        score = lambda x: d1_forward(d1, x, weights=weights)  # noqa: E731
        penalty_critic = lambda x: d1_forward(d1, x, frozen_batch_stats=True, weights=weights)  # noqa: E731
    else:
        score = penalty_critic = d1
    s_fake = ad.mean(score(fake))
    s_real = ad.mean(score(real))
    sample = interpolate(real, fake, rng, epsilon)
    gp = gradient_penalty(penalty_critic, sample.x_hat)
    loss = ad.add(ad.sub(s_fake, s_real), ad.mul(gp, float(lambda_gp)))
    if return_parts:
        return loss, {"d1_fake": float(s_fake.item()), "d1_real": float(s_real.item()), "gp": float(gp.item())}
    return loss


def gen_adv1(d1, g_x: Tensor, update_sn: bool = True) -> Tensor:
    """Negative mean critic score of generated samples."""
    scores = d1_forward(d1, g_x, update_sn=update_sn) if isinstance(d1, GlobalDiscriminator) else d1(g_x)
    return ad.neg(ad.mean(scores))


def bce_map(q_hat, q, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy between a probability map and labels, natural log.

    ``q`` may be a full label map or a scalar 0/1. Probabilities are clamped
    to ``[BCE_EPS, 1 - BCE_EPS]``. ``reduction="sum"`` sums over pixels (and
    averages over the batch); ``"mean"`` averages over every element.
    """
    q_hat = _t(q_hat)
    q_arr = np.broadcast_to(np.asarray(q.data if isinstance(q, Tensor) else q, dtype=q_hat.dtype), q_hat.shape)
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    p = ad.clip(q_hat, BCE_EPS, 1.0 - BCE_EPS)
    terms = []
    if np.any(q_arr != 0):
        terms.append(ad.mul(Tensor(q_arr), ad.log(p)))
    if np.any(q_arr != 1):
        terms.append(ad.mul(Tensor(1.0 - q_arr), ad.log(ad.sub(1.0, p))))
    ll = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    if reduction == "mean":
        return ad.neg(ad.mean(ll))
    if ll.ndim <= 2:
        return ad.neg(ad.sum_(ll))
    per_sample = ad.sum_(ll, axis=tuple(range(1, ll.ndim)))
    return ad.neg(ad.mean(per_sample))


def d2_loss(d2, y, g_x, reduction: str = "mean", update_sn: bool = True) -> Tensor:
    """Local discriminator loss: real patches labelled 1, generated patches 0."""
    if isinstance(d2, LocalDiscriminator):
        weights = d2.effective_weights(update_sn)
        fwd = lambda x: d2_forward(d2, x, weights=weights)  # noqa: E731
    else:
        fwd = d2
    g_data = g_x.data if isinstance(g_x, Tensor) else np.asarray(g_x)
    y_data = y.data if isinstance(y, Tensor) else np.asarray(y)
    _check_same("d2_loss", y_data, g_data)
    return ad.add(bce_map(fwd(Tensor(y_data)), 1.0, reduction), bce_map(fwd(Tensor(g_data)), 0.0, reduction))


def gen_adv2(d2, g_x: Tensor, reduction: str = "mean", update_sn: bool = True) -> Tensor:
    """Generator loss for fooling the local discriminator."""
    fwd = (lambda x: d2_forward(d2, x, update_sn=update_sn)) if isinstance(d2, LocalDiscriminator) else d2
    return bce_map(fwd(g_x), 1.0, reduction)


def attention_weights(m, beta: float) -> np.ndarray:
    """Difficulty weights ``(1 - m) ** beta``; returned as a plain constant array."""
    m = m.data if isinstance(m, Tensor) else np.asarray(m)
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return np.power(1.0 - m, beta)


def attention_recon_loss(y, g_x, f, p: int = 1) -> Tensor:
    """Mean over voxels of ``f * |y - g_x| ** p`` with ``f`` a constant weight map."""
    g_x = _t(g_x)
    y = _t(y, g_x)
    f_arr = f.data if isinstance(f, Tensor) else np.asarray(f)
    _check_same("attention_recon_loss", y, g_x)
    _check_same("attention_recon_loss", f_arr, g_x)
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    return ad.mean(ad.mul(Tensor(f_arr.astype(g_x.dtype, copy=False)), _error_power(y, g_x, p)))


def total_gen_loss(att, adv1, adv2, w: LossWeights) -> Tensor:
    """``att + lambda1 * adv1 + lambda2 * adv2``; ``None`` terms are skipped."""
    total = _t(att)
    if adv1 is not None:
        total = ad.add(total, ad.mul(_t(adv1), float(w.lambda1)))
    if adv2 is not None:
        total = ad.add(total, ad.mul(_t(adv2), float(w.lambda2)))
    return total
