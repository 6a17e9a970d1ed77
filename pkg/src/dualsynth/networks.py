"""UNet generator, Wasserstein critic and dense local discriminator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

__all__ = [
    "SpectralNormState",
    "spectral_normalize",
    "Conv2d",
    "Linear",
    "BatchNorm2d",
    "Network",
    "GeneratorNet",
    "GlobalDiscriminator",
    "LocalDiscriminator",
    "build_generator",
    "build_global_discriminator",
    "build_local_discriminator",
    "generator_forward",
    "d1_forward",
    "d2_forward",
]


# ---------------------------------------------------------------------------
# spectral normalization


@dataclass
class SpectralNormState:
    """Power-iteration vectors for one weight: ``u`` spans outputs, ``v`` inputs."""

    u: np.ndarray
    v: Optional[np.ndarray] = None
    power_iterations: int = 1
    degenerate: bool = False

    @classmethod
    def create(cls, out_dim: int, rng: np.random.Generator, power_iterations: int = 1, dtype=np.float64):
        u = rng.standard_normal(out_dim)
        return cls((u / np.linalg.norm(u)).astype(dtype), None, power_iterations)


def _unit(v):
    n = np.linalg.norm(v)
    return (v / n if n > 0 else v), n


def spectral_normalize(weight: Tensor, state: SpectralNormState, update: bool = True) -> Tensor:
    """Divide ``weight`` by a power-iteration estimate of its largest singular value.

    The weight is viewed as (out, rest). With ``update`` the vectors in
    ``state`` are refined in place for ``state.power_iterations`` steps. The
    estimate ``u^T W v`` is differentiable in ``weight``; ``u`` and ``v`` are
    constants. An all-zero weight is returned unchanged and flagged through
    ``state.degenerate``.
    """
    out_dim = weight.shape[0]
    if state.u.shape != (out_dim,):
        raise DimensionError(f"spectral_normalize: state vector has shape {state.u.shape}, weight has {out_dim} rows")
    w2 = weight.data.reshape(out_dim, -1)
    if not np.any(w2):
        state.degenerate = True
        return weight
    u = state.u.astype(w2.dtype)
    v = state.v
    if update or v is None or v.shape != (w2.shape[1],):
        for _ in range(max(state.power_iterations, 1) if update else 1):
            v, _ = _unit(w2.T @ u)
            u, _ = _unit(w2 @ v)
        state.u, state.v = u, v
    v = v.astype(w2.dtype)
    if float(u @ (w2 @ v)) == 0.0:
        state.degenerate = True
        return weight
    state.degenerate = False
    wv = ad.matmul(ad.reshape(weight, (out_dim, -1)), Tensor(v.reshape(-1, 1)))
    sigma = ad.sum_(ad.mul(wv, Tensor(u.reshape(-1, 1))))
    return ad.div(weight, sigma)


# ---------------------------------------------------------------------------
# layers


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, cin, cout, k, rng, dtype, padding=None, spectral_norm=False, power_iterations=1):
        self.weight = Tensor(_he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.padding = k // 2 if padding is None else padding
        self.sn = SpectralNormState.create(cout, rng, power_iterations, dtype) if spectral_norm else None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        if self.sn is None:
            return {}
        return {"sn_u": self.sn.u, "sn_v": self.sn.v if self.sn.v is not None else np.zeros(0, self.weight.dtype)}

    def effective_weight(self, update_sn: bool = True) -> Tensor:
        return spectral_normalize(self.weight, self.sn, update_sn) if self.sn is not None else self.weight

    def __call__(self, x: Tensor, update_sn: bool = True, weight: Optional[Tensor] = None) -> Tensor:
        w = weight if weight is not None else self.effective_weight(update_sn)
        y = ad.conv2d(x, w, 1, self.padding)
        return ad.add(y, ad.reshape(self.bias, (1, -1, 1, 1)))


class Linear:
    def __init__(self, fin, fout, rng, dtype, spectral_norm=False, power_iterations=1):
        # stored as (out, in) so spectral normalization sees the same orientation as convs
        self.weight = Tensor(_he_uniform(rng, (fout, fin), fin, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True)
        self.sn = SpectralNormState.create(fout, rng, power_iterations, dtype) if spectral_norm else None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        if self.sn is None:
            return {}
        return {"sn_u": self.sn.u, "sn_v": self.sn.v if self.sn.v is not None else np.zeros(0, self.weight.dtype)}

    def effective_weight(self, update_sn: bool = True) -> Tensor:
        return spectral_normalize(self.weight, self.sn, update_sn) if self.sn is not None else self.weight

    def __call__(self, x: Tensor, update_sn: bool = True, weight: Optional[Tensor] = None) -> Tensor:
        w = weight if weight is not None else self.effective_weight(update_sn)
        return ad.add(ad.matmul(x, ad.transpose(w)), self.bias)


class BatchNorm2d:
    def __init__(self, c, dtype, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor, training: bool, frozen_batch_stats: bool = False) -> Tensor:
        if not training:
            return ad.batchnorm_affine(x, self.running_mean, self.running_var, self.gamma, self.beta, self.eps)
        if frozen_batch_stats:
            # batch statistics enter as constants
            mu = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            return ad.batchnorm_affine(x, mu, var, self.gamma, self.beta, self.eps)
        y, mu, var = ad.batchnorm_train(x, self.gamma, self.beta, self.eps)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * m / max(m - 1, 1)
        self.running_mean[:] = (1 - self.momentum) * self.running_mean + self.momentum * mu
        self.running_var[:] = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        return y


# ---------------------------------------------------------------------------
# networks


class Network:
    """Named collection of layers with parameter and buffer access."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)
        self.training = True
        self._layers: dict[str, object] = {}

    def _add(self, name, layer):
        self._layers[name] = layer
        return layer

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for lname, layer in self._layers.items():
            for pname, p in layer.params().items():
                out[f"{lname}.{pname}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self._layers.items():
            for bname, b in layer.buffers().items():
                out[f"{lname}.{bname}"] = b
        return out

    def set_buffer(self, name: str, value: np.ndarray):
        lname, bname = name.rsplit(".", 1)
        layer = self._layers[lname]
        if bname == "sn_u":
            layer.sn.u = value.astype(self.dtype).copy()
        elif bname == "sn_v":
            layer.sn.v = value.astype(self.dtype).copy() if value.size else None
        else:
            getattr(layer, bname)[:] = value

    def effective_weights(self, update_sn: bool = True) -> dict[str, Tensor]:
        """Weights as used in a forward pass, spectrally normalized where configured.

        Computing these once and passing them to several forward passes shares
        one normalization (and one power-iteration update) between them.
        """
        update_sn = update_sn and self.training
        return {name: layer.effective_weight(update_sn) for name, layer in self._layers.items()
                if isinstance(layer, (Conv2d, Linear))}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self


class GeneratorNet(Network):
    """2.5-D UNet: a stack of adjacent slices in, the centre slice out."""

    def __init__(self, depth=3, base_channels=16, in_channels=5, out_channels=1, norm_kind="batch",
                 seed=0, dtype=np.float32, output="tanh"):
        super().__init__(dtype)
        if depth < 1:
            raise ValueError(f"generator depth must be >= 1, got {depth}")
        if base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {base_channels}")
        if norm_kind not in ("batch", "none"):
            raise ValueError(f"norm_kind must be 'batch' or 'none', got {norm_kind!r}")
        if output not in ("tanh", "linear"):
            raise ValueError(f"output must be 'tanh' or 'linear', got {output!r}")
        self.output = output
        self.depth = depth
        self.base_channels = base_channels
        self.in_channels = in_channels
        self.norm_kind = norm_kind
        rng = np.random.default_rng(seed)
        chans = [base_channels * 2 ** i for i in range(depth + 1)]
        cin = in_channels
        for i in range(depth):
            self._block(f"enc{i}", cin, chans[i], rng)
            cin = chans[i]
        self._block("mid", cin, chans[depth], rng)
        for i in reversed(range(depth)):
            self._block(f"dec{i}", chans[i + 1] + chans[i], chans[i], rng)
        self.final = self._add("out", Conv2d(chans[0], out_channels, 1, rng, dtype))

    def _block(self, name, cin, cout, rng):
        self._add(f"{name}.conv1", Conv2d(cin, cout, 3, rng, self.dtype))
        if self.norm_kind == "batch":
            self._add(f"{name}.norm1", BatchNorm2d(cout, self.dtype))
        self._add(f"{name}.conv2", Conv2d(cout, cout, 3, rng, self.dtype))
        if self.norm_kind == "batch":
            self._add(f"{name}.norm2", BatchNorm2d(cout, self.dtype))

    def _run_block(self, name, x):
        for j in (1, 2):
            x = self._layers[f"{name}.conv{j}"](x)
            if self.norm_kind == "batch":
                x = self._layers[f"{name}.norm{j}"](x, self.training)
            x = ad.relu(x)
        return x

    def __call__(self, x: Tensor) -> Tensor:
        return generator_forward(self, x)


def build_generator(depth: int = 3, base_channels: int = 16, norm_kind: str = "batch", seed: int = 0,
                    dtype=np.float32, in_channels: int = 5, output: str = "tanh") -> GeneratorNet:
    """``output="tanh"`` bounds predictions to the normalized intensity range [-1, 1]."""
    return GeneratorNet(depth, base_channels, in_channels, 1, norm_kind, seed, dtype, output)


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def generator_forward(net: GeneratorNet, source_stack) -> Tensor:
    """(B, 5, H, W) -> (B, 1, H, W)."""
    x = _as_input(source_stack, net.dtype)
    if x.ndim != 4 or x.shape[1] != net.in_channels:
        raise DimensionError(f"generator expects input (B, {net.in_channels}, H, W), got {x.shape}")
    f = 2 ** net.depth
    if x.shape[2] % f or x.shape[3] % f:
        raise DimensionError(f"generator input spatial size {x.shape[2:]} must be divisible by 2**depth = {f}")
    skips = []
    for i in range(net.depth):
        x = net._run_block(f"enc{i}", x)
        skips.append(x)
        x = ad.maxpool2d(x, 2)
    x = net._run_block("mid", x)
    for i in reversed(range(net.depth)):
        x = ad.upsample_nearest(x, 2)
        x = ad.concat([x, skips[i]], axis=1)
        x = net._run_block(f"dec{i}", x)
    x = net.final(x)
    return ad.tanh(x) if net.output == "tanh" else x


class GlobalDiscriminator(Network):
    """Wasserstein critic: conv stages with max pooling, then fully connected layers to one score."""

    def __init__(self, input_hw=64, widths=(32, 64, 128), conv_width=256, fc_widths=(512, 128),
                 norm_kind="none", spectral_norm=True, power_iterations=1, seed=0, dtype=np.float32):
        super().__init__(dtype)
        if norm_kind not in ("batch", "none"):
            raise ValueError(f"norm_kind must be 'batch' or 'none', got {norm_kind!r}")
        h, w = (input_hw, input_hw) if isinstance(input_hw, int) else tuple(input_hw)
        n_pool = len(widths)
        if h < 2 ** n_pool or w < 2 ** n_pool or h % 2 ** n_pool or w % 2 ** n_pool:
            raise DimensionError(f"global discriminator input {h}x{w} must be >= and divisible by {2 ** n_pool}")
        self.input_hw = (h, w)
        self.widths = tuple(widths)
        self.norm_kind = norm_kind
        rng = np.random.default_rng(seed)
        sn = dict(spectral_norm=spectral_norm, power_iterations=power_iterations)
        cin = 1
        for i, c in enumerate(widths):
            self._add(f"stage{i}.conv", Conv2d(cin, c, 3, rng, dtype, **sn))
            if norm_kind == "batch":
                self._add(f"stage{i}.norm", BatchNorm2d(c, dtype))
            cin = c
        self._add("conv", Conv2d(cin, conv_width, 3, rng, dtype, **sn))
        fin = conv_width * (h // 2 ** n_pool) * (w // 2 ** n_pool)
        for j, fw in enumerate(fc_widths):
            self._add(f"fc{j}", Linear(fin, fw, rng, dtype, **sn))
            fin = fw
        self._add("head", Linear(fin, 1, rng, dtype))
        self.n_fc = len(fc_widths)

    def __call__(self, x, frozen_batch_stats=False, update_sn=True, weights=None) -> Tensor:
        return d1_forward(self, x, frozen_batch_stats, update_sn, weights)


def build_global_discriminator(input_hw=64, **kwargs) -> GlobalDiscriminator:
    return GlobalDiscriminator(input_hw, **kwargs)


def d1_forward(net: GlobalDiscriminator, target_patch, frozen_batch_stats: bool = False,
               update_sn: bool = True, weights: Optional[dict] = None) -> Tensor:
    """(B, 1, H, W) -> (B,) unbounded critic scores.

    ``weights`` may carry the output of ``net.effective_weights()`` to reuse
    one spectral normalization across several calls.
    """
    x = _as_input(target_patch, net.dtype)
    if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != net.input_hw:
        raise DimensionError(f"global discriminator expects (B, 1, {net.input_hw[0]}, {net.input_hw[1]}), got {x.shape}")
    w = weights if weights is not None else net.effective_weights(update_sn)
    L = net._layers
    for i in range(len(net.widths)):
        x = L[f"stage{i}.conv"](x, weight=w[f"stage{i}.conv"])
        if net.norm_kind == "batch":
            x = L[f"stage{i}.norm"](x, net.training, frozen_batch_stats)
        x = ad.maxpool2d(ad.relu(x), 2)
    x = ad.relu(L["conv"](x, weight=w["conv"]))
    x = ad.reshape(x, (x.shape[0], -1))
    for j in range(net.n_fc):
        x = ad.relu(L[f"fc{j}"](x, weight=w[f"fc{j}"]))
    return ad.reshape(L["head"](x, weight=w["head"]), (x.shape[0],))


class LocalDiscriminator(Network):
    """Fully convolutional discriminator producing a per-pixel probability map."""

    def __init__(self, widths=(32, 64, 128), spectral_norm=True, power_iterations=1, seed=0, dtype=np.float32):
        super().__init__(dtype)
        rng = np.random.default_rng(seed)
        sn = dict(spectral_norm=spectral_norm, power_iterations=power_iterations)
        self.widths = tuple(widths)
        cin = 1
        for i, c in enumerate(widths):
            self._add(f"down{i}", Conv2d(cin, c, 3, rng, dtype, **sn))
            cin = c
        up_widths = list(reversed(widths[:-1])) + [max(widths[0] // 2, 1)]
        for i, c in enumerate(up_widths):
            self._add(f"up{i}", Conv2d(cin, c, 3, rng, dtype, **sn))
            cin = c
        self._add("out", Conv2d(cin, 1, 3, rng, dtype))

    def __call__(self, x, update_sn=True, weights=None) -> Tensor:
        return d2_forward(self, x, update_sn, weights)


def build_local_discriminator(**kwargs) -> LocalDiscriminator:
    return LocalDiscriminator(**kwargs)


def d2_forward(net: LocalDiscriminator, target_patch, update_sn: bool = True,
               weights: Optional[dict] = None) -> Tensor:
    """(B, 1, H, W) -> (B, 1, H, W) confidence map with values in (0, 1)."""
    x = _as_input(target_patch, net.dtype)
    f = 2 ** len(net.widths)
    if x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"local discriminator expects (B, 1, H, W), got {x.shape}")
    if x.shape[2] % f or x.shape[3] % f:
        raise DimensionError(f"local discriminator input spatial size {x.shape[2:]} must be divisible by {f}")
    w = weights if weights is not None else net.effective_weights(update_sn)
    L = net._layers
    for i in range(len(net.widths)):
        x = ad.maxpool2d(ad.relu(L[f"down{i}"](x, weight=w[f"down{i}"])), 2)
    for i in range(len(net.widths)):
        x = ad.relu(L[f"up{i}"](ad.upsample_nearest(x, 2), weight=w[f"up{i}"]))
    return ad.sigmoid(L["out"](x, weight=w["out"]))
