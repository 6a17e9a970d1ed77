"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every operation records a node carrying a monotonically increasing sequence
number, so sorting the reachable nodes by that number gives a valid tape
order. Backward rules are themselves written with differentiable operations,
which makes one extra level of differentiation available
(``grad(..., create_graph=True)``). The convolution family is closed under
differentiation: the adjoints of ``conv2d`` are ``conv2d_input_grad`` and
``conv2d_weight_grad``, and the adjoints of those are the other two members.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradMap",
    "CheckReport",
    "DimensionError",
    "UnsupportedOperatorError",
    "SecondOrderUnsupportedError",
    "ContractError",
    "tensor",
    "no_grad",
    "precision",
    "default_dtype",
    "forward_op",
    "backward",
    "grad",
    "grad_norm_differentiable",
    "finite_difference_check",
    "OPS",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UnsupportedOperatorError(ValueError):
    """An operator kind that the engine does not implement."""


class SecondOrderUnsupportedError(RuntimeError):
    """A differentiable gradient was requested through an op that cannot provide one."""


class ContractError(ValueError):
    """A call violated a documented precondition."""


# ---------------------------------------------------------------------------
# global state

_seq = itertools.count()
_GRAD_ENABLED = [True]
_DTYPE = [np.float64]

_PRECISION_MODES = {"verify": np.float64, "float64": np.float64, "train": np.float32, "float32": np.float32}


def default_dtype():
    return _DTYPE[0]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily set the dtype used for new tensors built from Python data.

    ``"verify"`` selects 64-bit floats, ``"train"`` selects 32-bit floats.
    """
    try:
        dt = _PRECISION_MODES[mode]
    except KeyError:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_PRECISION_MODES)}") from None
    old = _DTYPE[0]
    _DTYPE[0] = dt
    try:
        yield
    finally:
        _DTYPE[0] = old


@contextlib.contextmanager
def no_grad():
    old = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = old


@contextlib.contextmanager
def _enable_grad(flag: bool):
    old = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = flag
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = old


# ---------------------------------------------------------------------------
# core types


class Node:
    __slots__ = ("seq", "kind", "parents", "backward_fn", "second_order")

    def __init__(self, kind, parents, backward_fn, second_order):
        self.seq = next(_seq)
        self.kind = kind
        self.parents = parents
        self.backward_fn = backward_fn
        self.second_order = second_order


class Tensor:
    """An n-dimensional real array that may take part in differentiation."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None

    # -- basic properties
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return abs_(self)

    def sqrt(self):
        return sqrt(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)


def _raise_not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a tensor; Python scalars and lists take the current precision's dtype."""
    if dtype is None and not isinstance(data, (np.ndarray, Tensor)):
        dtype = _DTYPE[0]
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: Sequence[Tensor], kind: str, backward_fn: Callable,
          second_order: bool = True) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(kind, tuple(parents), backward_fn, second_order)
    return out


def _const(arr: np.ndarray) -> Tensor:
    return Tensor(arr)


# ---------------------------------------------------------------------------
# broadcasting helpers


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and g.shape[i + extra] != 1
    )
    out = sum_(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, tuple(shape))


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: cannot broadcast left operand {a.shape} with right operand {b.shape}") from None


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast_to", bw)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("subtract", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make(a.data - b.data, (a, b), "subtract", bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("multiply", a, b)

    def bw(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make(a.data * b.data, (a, b), "multiply", bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("divide", a, b)

    def bw(g):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), "divide", bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "negate", lambda g: (neg(g),))


def power(a: Tensor, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant real exponent."""
    if isinstance(exponent, Tensor):
        raise UnsupportedOperatorError("power: exponent must be a constant, not a Tensor")
    p = float(exponent)

    def bw(g):
        if p == 0.0:
            return (mul(g, _const(np.zeros_like(a.data))),)
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _make(np.power(a.data, p), (a,), "power", bw)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), "abs", lambda g: (mul(g, _const(sign)),))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = (a.data > 0).astype(a.dtype)
    return _make(a.data * mask, (a,), "relu", lambda g: (mul(g, _const(mask)),))


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    def bw(g):
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _make(_sigmoid_np(a.data), (a,), "sigmoid", bw)


def tanh(a: Tensor) -> Tensor:
    def bw(g):
        t = tanh(a)
        return (mul(g, sub(1.0, mul(t, t))),)

    return _make(np.tanh(a.data), (a,), "tanh", bw)


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: (div(g, a),))


def exp(a: Tensor) -> Tensor:
    return _make(np.exp(a.data), (a,), "exp", lambda g: (mul(g, exp(a)),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    zero = out == 0

    def bw(g):
        # derivative taken as 0 where the output is exactly 0
        if not zero.any():
            return (div(g, mul(sqrt(a), 2.0)),)
        safe = add(mul(sqrt(a), 2.0), _const(zero.astype(a.dtype)))
        return (mul(div(g, safe), _const((~zero).astype(a.dtype))),)

    return _make(out, (a,), "sqrt", bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (mul(g, _const(mask)),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def bw(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bw(g):
        return (broadcast_to(reshape(div(g, float(n)), kept), a.shape),)

    return _make(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), "mean", bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view operand of shape {a.shape} as {shape}") from None
    return _make(data, (a,), "reshape", lambda g: (reshape(g, a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), "transpose", lambda g: (transpose(g, inv),))


def _slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    full = a.shape[axis]
    return _make(a.data[tuple(idx)].copy(), (a,), "slice",
                 lambda g: (_pad_axis(g, axis, start, full),))


def _pad_axis(a: Tensor, axis: int, start: int, full: int) -> Tensor:
    widths = [(0, 0)] * a.ndim
    widths[axis] = (start, full - start - a.shape[axis])
    stop = start + a.shape[axis]
    return _make(np.pad(a.data, widths), (a,), "pad",
                 lambda g: (_slice_axis(g, axis, start, stop),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for i, t in enumerate(tensors[1:], 1):
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise DimensionError(f"concat: operand {i} has shape {t.shape}, incompatible with {ref} along axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(_slice_axis(g, ax, int(bounds[i]), int(bounds[i + 1])) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", bw)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: left operand {a.shape} and right operand {b.shape} are not conformable 2-D matrices")

    def bw(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(a.data @ b.data, (a, b), "matmul", bw)


# ---------------------------------------------------------------------------
# convolution family


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col(x: np.ndarray, kh, kw, s, p):
    """(N, C, H, W) -> columns of shape (C*kh*kw, N*Ho*Wo)."""
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kh, s, p), _conv_out(w, kw, s, p)
    if kh == 1 and kw == 1 and p == 0:
        return x[:, :, ::s, ::s].transpose(1, 0, 2, 3).reshape(c, -1), ho, wo
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def _col2im(cols: np.ndarray, shape, kh, kw, s, p, ho, wo):
    """Adjoint of ``_im2col``: scatter-add columns back into an (N, C, H, W) array."""
    n, c, h, w = shape
    if kh == 1 and kw == 1 and p == 0:
        out = np.zeros(shape, dtype=cols.dtype)
        out[:, :, ::s, ::s] = cols.reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
        return out
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, i, j].transpose(1, 0, 2, 3)
    return xp[:, :, p:p + h, p:p + w] if p else xp


def _channels_first(g: np.ndarray) -> np.ndarray:
    """(N, O, H, W) -> (O, N*H*W)."""
    return g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw), zero padding."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-D (N, C, H, W), got {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be 4-D (O, C, kh, kw), got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels but kernel expects {w.shape[1]} (kernel shape {w.shape})")
    o, c, kh, kw = w.shape
    if _conv_out(x.shape[2], kh, stride, padding) < 1 or _conv_out(x.shape[3], kw, stride, padding) < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {w.shape} with padding {padding}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    out = (w.data.reshape(o, -1) @ cols).reshape(o, x.shape[0], ho, wo).transpose(1, 0, 2, 3)
    hw = x.shape[2:]

    def bw(g):
        return (conv2d_input_grad(g, w, hw, stride, padding),
                conv2d_weight_grad(x, g, (kh, kw), stride, padding))

    return _make(np.ascontiguousarray(out), (x, w), "conv2d", bw)


def conv2d_input_grad(g: Tensor, w: Tensor, input_hw, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``conv2d`` with respect to its input (a transposed convolution)."""
    o, c, kh, kw = w.shape
    n, _, ho, wo = g.shape
    cols = w.data.reshape(o, -1).T @ _channels_first(g.data)
    out = _col2im(cols, (n, c) + tuple(input_hw), kh, kw, stride, padding, ho, wo)

    def bw(gg):
        return (conv2d(gg, w, stride, padding),
                conv2d_weight_grad(gg, g, (kh, kw), stride, padding))

    return _make(out, (g, w), "conv2d_transpose", bw)


def conv2d_weight_grad(x: Tensor, g: Tensor, kernel_hw, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``conv2d`` with respect to its kernel."""
    kh, kw = kernel_hw
    o = g.shape[1]
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    out = (_channels_first(g.data) @ cols.T).reshape(o, x.shape[1], kh, kw)
    hw = x.shape[2:]

    def bw(gw):
        return (conv2d_input_grad(g, gw, hw, stride, padding),
                conv2d(x, gw, stride, padding))

    return _make(out, (x, g), "conv2d_weight_grad", bw)


# ---------------------------------------------------------------------------
# pooling and resampling


def _check_divisible(kind, x, k):
    if x.ndim != 4:
        raise DimensionError(f"{kind}: input must be 4-D (N, C, H, W), got {x.shape}")
    if x.shape[2] % k or x.shape[3] % k:
        raise DimensionError(f"{kind}: spatial size {x.shape[2:]} must be divisible by {k}")


def upsample_nearest(x: Tensor, k: int = 2) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"upsample: input must be 4-D (N, C, H, W), got {x.shape}")
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)
    return _make(out, (x,), "upsample", lambda g: (sumpool2d(g, k),))


def sumpool2d(x: Tensor, k: int = 2) -> Tensor:
    _check_divisible("sumpool2d", x, k)
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // k, k, w // k, k).sum(axis=(3, 5))
    return _make(out, (x,), "sumpool2d", lambda g: (upsample_nearest(g, k),))


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties route the gradient to the first maximum."""
    _check_divisible("maxpool2d", x, k)
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    onehot = np.zeros_like(blocks)
    np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
    mask = onehot.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    def bw(g):
        return (mul(upsample_nearest(g, k), _const(mask)),)

    return _make(out, (x,), "maxpool2d", bw)


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Batch normalization over (N, H, W) per channel using batch statistics.

    Returns the output tensor together with the batch mean and biased variance
    (plain arrays) so callers can update running statistics. The backward rule
    is computed directly in numpy and is not itself differentiable.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: input {x.shape} incompatible with gamma {gamma.shape} / beta {beta.shape}")
    axes = (0, 2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, -1, 1, 1)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    def bw(g):
        gd = g.data
        dgamma = (gd * xhat).sum(axis=axes)
        dbeta = gd.sum(axis=axes)
        dxhat = gd * g4
        dx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return _const(dx), _const(dgamma), _const(dbeta)

    y = _make(out, (x, gamma, beta), "batchnorm", bw, second_order=False)
    return y, mu.reshape(-1), var.reshape(-1)


def batchnorm_affine(x: Tensor, mean_: np.ndarray, var: np.ndarray, gamma: Tensor, beta: Tensor,
                     eps: float = 1e-5) -> Tensor:
    """Normalize with fixed statistics; composed of differentiable primitives."""
    c = x.shape[1]
    scale = _const((1.0 / np.sqrt(np.asarray(var) + eps)).reshape(1, c, 1, 1).astype(x.dtype))
    shift = _const(np.asarray(mean_).reshape(1, c, 1, 1).astype(x.dtype))
    return add(mul(mul(sub(x, shift), scale), reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


# ---------------------------------------------------------------------------
# operator registry


OPS: dict[str, Callable] = {
    "add": add,
    "subtract": sub,
    "multiply": mul,
    "divide": div,
    "negate": neg,
    "power": power,
    "abs": abs_,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "clip": clip,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv2d_transpose": conv2d_input_grad,
    "conv2d_weight_grad": conv2d_weight_grad,
    "maxpool2d": maxpool2d,
    "upsample": upsample_nearest,
    "sumpool2d": sumpool2d,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "concat": lambda *ts, axis=1: concat(ts, axis=axis),
    "batchnorm": lambda x, g, b, eps=1e-5: batchnorm_train(x, g, b, eps)[0],
}


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Apply the operator named ``kind`` to ``inputs`` with keyword ``attrs``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise UnsupportedOperatorError(f"unsupported operator kind {kind!r}") from None
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# backward passes


class GradMap:
    """Gradients keyed by tensor identity.

    Looking up a tensor that was not reached returns zeros of its shape.
    """

    def __init__(self):
        self._grads: dict[int, Tensor] = {}
        self._keys: dict[int, Tensor] = {}

    def _set(self, t: Tensor, g: Tensor):
        self._grads[id(t)] = g
        self._keys[id(t)] = t

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g.data

    def tensor(self, t: Tensor) -> Tensor:
        g = self._grads.get(id(t))
        return Tensor(np.zeros_like(t.data)) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self):
        return len(self._grads)

    def items(self):
        for k, g in self._grads.items():
            yield self._keys[k], g.data


def _topo(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        if t.node is not None:
            stack.extend(p for p in t.node.parents if p.requires_grad)
    return sorted((t for t in seen.values() if t.node is not None), key=lambda t: t.node.seq, reverse=True)


def _run_backward(root: Tensor, targets: Optional[Iterable[Tensor]], create_graph: bool,
                  seed: Optional[Tensor] = None) -> dict[int, Tensor]:
    if not root.requires_grad:
        raise ContractError("backward: root does not depend on any tensor that requires a gradient")
    if seed is None and root.size != 1:
        raise ContractError(f"backward: root must be a scalar, got shape {root.shape}")
    order = _topo(root)

    relevant: Optional[set[int]] = None
    if targets is not None:
        # restrict traversal to nodes lying on a path from a target to the root
        relevant = {id(t) for t in targets}
        for t in reversed(order):
            if any(id(p) in relevant for p in t.node.parents):
                relevant.add(id(t))

    grads: dict[int, Tensor] = {id(root): seed if seed is not None else Tensor(np.ones_like(root.data))}
    with _enable_grad(create_graph):
        for t in order:
            g = grads.get(id(t))
            if g is None or (relevant is not None and id(t) not in relevant):
                continue
            node = t.node
            if create_graph and not node.second_order:
                raise SecondOrderUnsupportedError(
                    f"operation {node.kind!r} does not support differentiable gradients "
                    "(nested differentiation); use fixed statistics on this path")
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if relevant is not None and id(p) not in relevant:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
            if not create_graph and t is not root:
                grads.pop(id(t), None)
    return grads


def backward(root: Tensor) -> GradMap:
    """Gradients of the scalar ``root`` with respect to every leaf requiring a gradient."""
    grads = _run_backward(root, None, create_graph=False)
    gm = GradMap()
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is None:
            if t.requires_grad:
                gm._set(t, grads.get(id(t), Tensor(np.zeros_like(t.data))))
        else:
            stack.extend(t.node.parents)
    return gm


def grad(root: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         seed: Optional[Tensor] = None) -> list[Tensor]:
    """Gradients of ``root`` with respect to ``inputs``.

    With ``create_graph=True`` the returned gradients are themselves recorded
    and can be differentiated once more. ``seed`` replaces the implicit unit
    upstream gradient, which also allows non-scalar roots.
    """
    grads = _run_backward(root, inputs, create_graph, seed)
    out = []
    for x in inputs:
        g = grads.get(id(x))
        out.append(g if g is not None else Tensor(np.zeros_like(x.data)))
    return out


def grad_norm_differentiable(critic_output: Tensor, wrt: Tensor) -> Tensor:
    """Per-sample 2-norm of d(critic_output[i]) / d(wrt[i]), kept differentiable.

    ``critic_output`` holds one score per batch element and every sample must
    only depend on its own slice of ``wrt`` (true for networks without batch
    statistics). The result has shape (batch,).
    """
    if critic_output.ndim == 0:
        critic_output = reshape(critic_output, (1,))
    if critic_output.shape[0] != wrt.shape[0]:
        raise DimensionError(f"grad_norm: {critic_output.shape[0]} scores for a batch of {wrt.shape[0]}")
    if not critic_output.requires_grad:
        # a critic that ignores its input has zero gradient everywhere
        return Tensor(np.zeros(wrt.shape[0], dtype=wrt.dtype))
    (g,) = grad(sum_(critic_output), [wrt], create_graph=True)
    axes = tuple(range(1, g.ndim))
    sq = sum_(mul(g, g), axis=axes) if axes else mul(g, g)
    return sqrt(sq)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class CheckReport:
    kind: str
    max_rel_error: float
    tolerance: float
    per_input: list

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.kind}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e})"


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def gradcheck_fn(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-6,
                 tolerance: float = 1e-5, seed: int = 0, kind: str = "function",
                 wrt: Optional[Sequence[int]] = None) -> CheckReport:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` maps tensors to a tensor; a fixed random projection reduces
    non-scalar outputs to a scalar. Errors are the max-norm difference divided
    by the max-norm of the gradient, per input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    ts = [Tensor(a.copy(), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*ts)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.shape)

    def scalar(xs):
        with no_grad():
            return float(np.sum(fn(*[Tensor(x) for x in xs]).data * proj))

    root = sum_(mul(out, Tensor(proj)))
    analytic = grad(root, [ts[i] for i in wrt])
    errs = []
    for gi, i in zip(analytic, wrt):
        num = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = scalar(arrays)
            flat[j] = orig - step
            fm = scalar(arrays)
            flat[j] = orig
            nflat[j] = (fp - fm) / (2 * step)
        errs.append(_rel_error(gi.data, num))
    return CheckReport(kind, max(errs) if errs else 0.0, tolerance, errs)


def finite_difference_check(kind: str, inputs: Sequence, step: float = 1e-6, attrs: Optional[dict] = None,
                            tolerance: float = 1e-5, seed: int = 0) -> CheckReport:
    """Finite-difference check of a registered operator kind in 64-bit precision."""
    if step <= 0:
        raise ContractError(f"finite_difference_check: step must be positive, got {step}")
    if kind not in OPS:
        raise UnsupportedOperatorError(f"unsupported operator kind {kind!r}")
    arrays = [i.data if isinstance(i, Tensor) else np.asarray(i) for i in inputs]
    return gradcheck_fn(lambda *ts: forward_op(kind, ts, attrs), arrays, step=step,
                        tolerance=tolerance, seed=seed, kind=kind)
