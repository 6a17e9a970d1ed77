"""Finite-difference verification suite for every operator and loss."""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import CheckReport, Tensor, gradcheck_fn
from .networks import (
    GlobalDiscriminator,
    LocalDiscriminator,
    build_generator,
    generator_forward,
)

TOLERANCE = 1e-5
STEP = 1e-6


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    # pairwise gaps of at least 1e-2 keep max-pool selections stable under perturbation
    n = int(np.prod(shape))
    return (rng.permutation(n) * 1e-2 + rng.uniform(0, 1e-3, n)).reshape(shape) - n * 5e-3


def operator_cases(rng: np.random.Generator) -> Iterator[tuple]:
    """Yield ``(kind, inputs, attrs)`` for every registered operator."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    yield "add", [a, rng.standard_normal((1, 4))], {}
    yield "subtract", [a, b], {}
    yield "multiply", [a, rng.standard_normal((3, 1))], {}
    yield "divide", [a, rng.uniform(0.5, 2.0, (3, 4))], {}
    yield "negate", [a], {}
    yield "power", [rng.uniform(0.5, 2.0, (3, 4))], {"exponent": 3.0}
    yield "power", [rng.uniform(0.5, 2.0, (3, 4))], {"exponent": 2.0}
    yield "power", [rng.uniform(0.5, 2.0, (3, 4))], {"exponent": -0.5}
    yield "abs", [_away_from_zero(rng, (3, 4))], {}
    yield "relu", [_away_from_zero(rng, (3, 4))], {}
    yield "sigmoid", [rng.standard_normal((3, 4)) * 3], {}
    yield "tanh", [rng.standard_normal((3, 4)) * 2], {}
    yield "log", [rng.uniform(0.2, 3.0, (3, 4))], {}
    yield "exp", [rng.standard_normal((3, 4))], {}
    yield "sqrt", [rng.uniform(0.2, 3.0, (3, 4))], {}
    yield "clip", [rng.uniform(-2, 2, (3, 4)) * np.where(rng.random((3, 4)) < 0.5, 0.2, 1.0)], {"lo": -0.9, "hi": 0.9}
    yield "matmul", [rng.standard_normal((3, 5)), rng.standard_normal((5, 2))], {}
    yield "sum", [rng.standard_normal((2, 3, 4))], {"axis": (0, 2), "keepdims": False}
    yield "mean", [rng.standard_normal((2, 3, 4))], {"axis": 1, "keepdims": True}
    yield "reshape", [a], {"shape": (2, 6)}
    yield "transpose", [rng.standard_normal((2, 3, 4))], {"axes": (2, 0, 1)}
    yield "broadcast_to", [rng.standard_normal((3, 1))], {"shape": (2, 3, 4)}
    yield "concat", [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))], {"axis": 1}
    yield "conv2d", [rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3))], {"padding": 1}
    yield "conv2d", [rng.standard_normal((1, 2, 7, 6)), rng.standard_normal((3, 2, 3, 3))], {"stride": 2, "padding": 1}
    yield "conv2d", [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 1, 1))], {}
    yield "conv2d_transpose", [rng.standard_normal((2, 4, 5, 5)), rng.standard_normal((4, 3, 3, 3))], \
        {"input_hw": (5, 5), "padding": 1}
    yield "conv2d_weight_grad", [rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((2, 4, 5, 5))], \
        {"kernel_hw": (3, 3), "padding": 1}
    yield "maxpool2d", [_distinct(rng, (2, 2, 4, 4))], {"k": 2}
    yield "upsample", [rng.standard_normal((2, 2, 3, 3))], {"k": 2}
    yield "sumpool2d", [rng.standard_normal((2, 2, 4, 4))], {"k": 2}
    yield "batchnorm", [rng.standard_normal((3, 2, 3, 3)), rng.uniform(0.5, 1.5, 2), rng.standard_normal(2)], {}


def _jitter_biases(net, seed):
    # zero-initialised biases put ReLU inputs exactly on the kink in flat regions
    rng = np.random.default_rng(seed + 1000)
    for name, p in net.parameters().items():
        if name.endswith("bias") or name.endswith("beta"):
            p.data[...] = rng.uniform(0.05, 0.2, p.shape)
    return net


def tiny_critic(seed: int = 0, batch_norm: bool = False) -> GlobalDiscriminator:
    net = GlobalDiscriminator(input_hw=8, widths=(2, 3, 3), conv_width=4, fc_widths=(5, 3),
                              norm_kind="batch" if batch_norm else "none", seed=seed, dtype=np.float64)
    # fixed power-iteration vectors make the critic a pure function of its weights
    net.effective_weights(update_sn=True)
    return _jitter_biases(net, seed).eval()


def tiny_local(seed: int = 0) -> LocalDiscriminator:
    net = LocalDiscriminator(widths=(2, 3, 3), seed=seed, dtype=np.float64)
    net.effective_weights(update_sn=True)
    return _jitter_biases(net, seed).eval()


def check_param_gradients(kind: str, net, loss_fn: Callable[[], Tensor], step=STEP) -> CheckReport:
    """Central differences over every parameter of ``net`` for a scalar loss.

    The error is scaled by the largest gradient entry over all parameters, so
    parameters whose exact gradient is zero (a bias in front of batch
    normalization) are judged against the gradient of the whole network.
    """
    params = list(net.parameters().values())
    analytic = ad.grad(loss_fn(), params)
    pairs = []
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        # the penalty term needs gradient recording even for plain evaluations
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(loss_fn().item())
            flat[j] = orig - step
            fm = float(loss_fn().item())
            flat[j] = orig
            num[j] = (fp - fm) / (2 * step)
        pairs.append((ga.data.reshape(-1), num))
    scale = max(max(np.max(np.abs(a)), np.max(np.abs(n))) for a, n in pairs)
    errs = [float(np.max(np.abs(a - n)) / max(scale, 1e-12)) for a, n in pairs]
    return CheckReport(kind, max(errs), TOLERANCE, errs)


def loss_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable[[], CheckReport]]]:
    """Yield ``(name, thunk)``; each thunk runs one finite-difference check."""
    y = rng.standard_normal((2, 1, 8, 8))
    gx = y + _away_from_zero(rng, (2, 1, 8, 8), 0.05)
    f = rng.uniform(0.1, 1.0, (2, 1, 8, 8))
    q_hat = rng.uniform(0.05, 0.95, (2, 1, 8, 8))
    q = (rng.random((2, 1, 8, 8)) < 0.5).astype(float)

    for p in (1, 2):
        yield f"recon_loss p={p}", lambda p=p: gradcheck_fn(lambda g: L.recon_loss(Tensor(y), g, p), [gx],
                                                              step=STEP, kind=f"recon_loss p={p}")
        yield f"attention_recon_loss p={p}", lambda p=p: gradcheck_fn(
            lambda g: L.attention_recon_loss(Tensor(y), g, f, p), [gx], step=STEP, kind=f"attention_recon_loss p={p}")
    for red in ("mean", "sum"):
        yield f"bce_map {red}", lambda red=red: gradcheck_fn(lambda qh: L.bce_map(qh, q, red), [q_hat],
                                                            step=STEP, kind=f"bce_map {red}")
    yield "total_gen_loss", lambda: gradcheck_fn(
        lambda a, b, c: L.total_gen_loss(a, b, c, L.LossWeights()), [np.array(1.3), np.array(-0.2), np.array(0.7)],
        step=STEP, kind="total_gen_loss")

    d1 = tiny_critic(1)
    d2 = tiny_local(2)
    yield "gen_adv1 (wrt generated image)", lambda: gradcheck_fn(
        lambda g: L.gen_adv1(d1, g), [gx], step=STEP, kind="gen_adv1")
    yield "gen_adv2 (wrt generated image)", lambda: gradcheck_fn(
        lambda g: L.gen_adv2(d2, g), [gx], step=STEP, kind="gen_adv2")
    yield "d2_loss (wrt local discriminator)", lambda: check_param_gradients(
        "d2_loss", d2, lambda: L.d2_loss(d2, y, gx))

    eps = rng.uniform(0.1, 0.9, 2)

    def critic_loss():
        return L.critic_loss_d1(d1, y, gx, 10.0, rng=None, epsilon=eps)

    yield "critic_loss_d1 incl. gradient penalty (wrt critic)", lambda: check_param_gradients(
        "critic_loss_d1", d1, critic_loss)
    d1_bn = tiny_critic(3, batch_norm=True).train()

    def critic_loss_bn():
        # the penalty path freezes batch statistics as constants, which is not the exact
        # gradient of the penalty; only the Wasserstein term is checked here
        return L.critic_loss_d1(d1_bn, y, gx, 0.0, rng=None, epsilon=eps, update_sn=False)

    yield "critic_loss_d1 batch-norm critic, no penalty (wrt critic)", lambda: check_param_gradients(
        "critic_loss_d1 (batch norm)", d1_bn, critic_loss_bn)

    g = _jitter_biases(build_generator(depth=2, base_channels=2, seed=4, dtype=np.float64), 4)
    x = rng.standard_normal((2, 5, 8, 8))
    proj = Tensor(rng.standard_normal((2, 1, 8, 8)))
    yield "generator mean output (wrt generator)", lambda: check_param_gradients(
        "generator mean", g, lambda: ad.mean(generator_forward(g, x)))
    yield "generator projected output (wrt generator)", lambda: check_param_gradients(
        "generator projected", g, lambda: ad.sum_(ad.mul(generator_forward(g, x), proj)))


def run_suite(seed: int = 0, verbose: bool = False) -> list[CheckReport]:
    """Run every operator and loss check in 64-bit precision."""
    rng = np.random.default_rng(seed)
    reports = []
    with ad.precision("verify"):
        for kind, inputs, attrs in operator_cases(rng):
            rep = ad.finite_difference_check(kind, inputs, step=STEP, attrs=attrs, tolerance=TOLERANCE)
            rep.kind = f"{kind} {attrs}" if attrs else kind
            reports.append(rep)
            if verbose:
                print(rep)
        for name, thunk in loss_cases(rng):
            rep = thunk()
            rep.kind = name
            reports.append(rep)
            if verbose:
                print(rep)
    return reports
