"""Rank-4 tensors with reverse-mode automatic differentiation.

Every tensor in this package has shape (batch, channel, height, width) and is
backed by a numpy array.  Operations build a computation graph; calling
:func:`backward` on a scalar-valued tensor walks that graph once in reverse
topological order and accumulates gradients additively into every
``requires_grad`` tensor on the path.  Gradients of tensors not on any path to
the root are left as ``None``, which readers should treat as zero.

Reductions use numpy's deterministic pairwise summation, so repeated runs on
identical inputs are bitwise identical.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, DimensionError, NumericError, UsageError

_grad_enabled = True

# Optional MAC recorder installed by the diagnostics module.  When set, conv2d
# and matmul report their multiply-accumulate counts to it.
_mac_recorder = None


@contextlib.contextmanager
def no_grad():
    """Context manager that disables graph construction."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_mac_recorder(recorder):
    """Install (or clear, with None) the active MAC recorder."""
    global _mac_recorder
    prev = _mac_recorder
    _mac_recorder = recorder
    return prev


def _record_macs(count: int) -> None:
    if _mac_recorder is not None:
        _mac_recorder.add(count)


class Tensor:
    """A rank-4 array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise DimensionError(
                f"tensors are rank-4 (batch, channel, height, width); got rank {arr.ndim}"
            )
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def full(shape, value, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def scalar(value, dtype=np.float32) -> "Tensor":
        return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data with no graph history."""
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def backward(self) -> None:
        """Run the reverse sweep with this tensor as the scalar root."""
        backward(self)

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, np.add, _add_backward)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, _sub_backward)

    def __rsub__(self, other):
        return _lift(other, self.dtype) - self

    def __mul__(self, other):
        return _binary(self, other, np.multiply, _mul_backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, np.divide, _div_backward)

    def __rtruediv__(self, other):
        return _lift(other, self.dtype) / self

    def __neg__(self):
        out_data = -self.data

        def backward(g):
            return (-g,)

        return _make(out_data, (self,), backward)

    def __pow__(self, power):
        if isinstance(power, Tensor):
            raise UsageError("exponent must be a Python scalar")
        p = float(power)
        x = self.data
        out_data = x**p

        def backward(g):
            return (g * p * x ** (p - 1.0),)

        return _make(out_data, (self,), backward)

    # -- pointwise methods -------------------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def backward(g):
            return (g * out_data,)

        return _make(out_data, (self,), backward)

    def log(self) -> "Tensor":
        x = self.data
        if x.min(initial=np.inf) <= 0.0:
            raise NumericError("log requires strictly positive input")
        out_data = np.log(x)

        def backward(g):
            return (g / x,)

        return _make(out_data, (self,), backward)

    def clip(self, lo: float, hi: float) -> "Tensor":
        x = self.data
        out_data = np.clip(x, lo, hi)

        def backward(g):
            inside = ((x >= lo) & (x <= hi)).astype(g.dtype)
            return (g * inside,)

        return _make(out_data, (self,), backward)

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None) -> "Tensor":
        ax = _norm_axes(axis)
        shape = self.shape
        out_data = self.data.sum(axis=ax, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g, shape).copy(),)

        return _make(out_data, (self,), backward)

    def mean(self, axis=None) -> "Tensor":
        ax = _norm_axes(axis)
        shape = self.shape
        count = 1
        for a in ax:
            count *= shape[a]
        out_data = self.data.mean(axis=ax, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g / g.dtype.type(count), shape).copy(),)

        return _make(out_data, (self,), backward)


def _norm_axes(axis) -> tuple[int, ...]:
    if axis is None:
        return (0, 1, 2, 3)
    if isinstance(axis, int):
        axis = (axis,)
    ax = tuple(sorted(a % 4 for a in axis))
    if len(set(ax)) != len(ax):
        raise UsageError(f"duplicate reduction axes: {axis}")
    return ax


# -- graph plumbing ----------------------------------------------------------------


def _make(out_data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Wrap a forward result, wiring the backward closure if grads are live."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the shape it broadcast from."""
    if grad.shape == shape:
        return grad
    axes = tuple(i for i in range(4) if shape[i] == 1 and grad.shape[i] != 1)
    return grad.sum(axis=axes, keepdims=True)


def _add_backward(a, b, out_data):
    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return backward


def _sub_backward(a, b, out_data):
    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return backward


def _mul_backward(a, b, out_data):
    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return backward


def _div_backward(a, b, out_data):
    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return backward


def _binary(a: Tensor, b, forward, make_backward) -> Tensor:
    b = _lift(b, a.dtype)
    if a.dtype != b.dtype:
        raise UsageError(f"dtype mismatch in binary op: {a.dtype} vs {b.dtype}")
    try:
        out_data = forward(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"shapes do not broadcast: {a.shape} vs {b.shape}") from exc
    return _make(out_data, (a, b), make_backward(a, b, out_data))


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root.

    Gradients accumulate additively, so a tensor consumed by several
    operations receives the sum of the per-consumer contributions.
    """
    if root.data.size != 1:
        raise UsageError(f"backward() requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward() on a tensor that does not require grad")

    # Iterative post-order DFS: children enter the order before their consumers.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            # Never accumulate in place: parent.grad may alias another node's
            # gradient buffer when a backward closure passes grads through.
            parent.grad = g if parent.grad is None else parent.grad + g


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- activations -----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out_data = np.maximum(xd, 0)

    def backward_fn(g):
        return (g * (xd > 0),)

    return _make(out_data, (x,), backward_fn)


def _sigmoid_stable(xd: np.ndarray) -> np.ndarray:
    """Overflow-free logistic: exp only ever sees non-positive arguments."""
    z = np.exp(-np.abs(xd))
    return np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out_data = _sigmoid_stable(xd)

    def backward_fn(g):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, (x,), backward_fn)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = _sigmoid_stable(xd)
    out_data = xd * sig

    def backward_fn(g):
        return (g * (sig + xd * sig * (1.0 - sig)),)

    return _make(out_data, (x,), backward_fn)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _phi(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF, elementwise, preserving dtype."""
    return (0.5 * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    xd = x.data
    cdf = _phi(xd)
    out_data = xd * cdf

    def backward_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf.astype(xd.dtype, copy=False)),)

    return _make(out_data, (x,), backward_fn)


def normal_cdf(x: Tensor) -> Tensor:
    """Differentiable standard normal CDF."""
    xd = x.data
    out_data = _phi(xd)

    def backward_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * pdf.astype(xd.dtype, copy=False),)

    return _make(out_data, (x,), backward_fn)


# "gelu-exact" is an alias making explicit that gelu here is the erf form,
# never the tanh approximation.
_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "silu": silu, "gelu": gelu, "gelu-exact": gelu}


def activation(x: Tensor, kind: str) -> Tensor:
    """Dispatch an elementwise nonlinearity by name."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(
            f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}"
        ) from None
    return fn(x)


# -- selection and structure ---------------------------------------------------------


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select: mask picks from a where true, else from b.

    The mask is a plain boolean array (no gradient flows through it).
    """
    mask = np.asarray(mask, dtype=bool)
    if a.dtype != b.dtype:
        raise UsageError(f"dtype mismatch in where: {a.dtype} vs {b.dtype}")
    out_data = np.where(mask, a.data, b.data)

    def backward_fn(g):
        zero = np.zeros((), dtype=g.dtype)
        ga = _unbroadcast(np.where(mask, g, zero), a.shape)
        gb = _unbroadcast(np.where(mask, zero, g), b.shape)
        return (ga, gb)

    return _make(out_data, (a, b), backward_fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    if len(parts) < 2:
        raise UsageError("concat_channels needs at least two tensors")
    first = parts[0]
    for p in parts[1:]:
        if p.dtype != first.dtype:
            raise UsageError("dtype mismatch in concat_channels")
        if (p.shape[0], p.shape[2], p.shape[3]) != (
            first.shape[0],
            first.shape[2],
            first.shape[3],
        ):
            raise DimensionError(
                f"concat_channels shapes disagree outside the channel axis: "
                f"{first.shape} vs {p.shape}"
            )
    widths = [p.shape[1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)

    def backward_fn(g):
        grads = []
        lo = 0
        for w in widths:
            grads.append(np.ascontiguousarray(g[:, lo : lo + w]))
            lo += w
        return tuple(grads)

    return _make(out_data, tuple(parts), backward_fn)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    """Take channels [lo, hi) from x."""
    n, c, h, w = x.shape
    if not (0 <= lo < hi <= c):
        raise DimensionError(f"channel slice [{lo}, {hi}) out of range for {c} channels")
    out_data = np.ascontiguousarray(x.data[:, lo:hi])

    def backward_fn(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, lo:hi] = g
        return (gx,)

    return _make(out_data, (x,), backward_fn)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a (rows, c, 1, 1) table by an integer index vector."""
    rows = table.shape[0]
    idx = np.asarray(index)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise UsageError("gather_rows index must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise DimensionError(f"gather_rows index out of range for {rows} rows")
    out_data = table.data[idx]

    def backward_fn(g):
        gt = np.zeros_like(table.data, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out_data, (table,), backward_fn)


# -- matmul and softmax ----------------------------------------------------------------


def swap_last2(x: Tensor) -> Tensor:
    """Transpose the trailing two axes (matrix transpose per batch/channel)."""
    out_data = np.ascontiguousarray(x.data.swapaxes(2, 3))

    def backward_fn(g):
        return (np.ascontiguousarray(g.swapaxes(2, 3)),)

    return _make(out_data, (x,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the trailing two axes."""
    if a.dtype != b.dtype:
        raise UsageError(f"dtype mismatch in matmul: {a.dtype} vs {b.dtype}")
    if a.shape[3] != b.shape[2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)
    n, c, h, w = out_data.shape
    _record_macs(n * c * h * a.shape[3] * w)

    def backward_fn(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(2, 3)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(2, 3), g), b.shape)
        return (ga, gb)

    return _make(out_data, (a, b), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with the max-shift trick."""
    xd = x.data
    shifted = xd - xd.max(axis=3, keepdims=True)
    e = np.exp(shifted)
    out_data = (e / e.sum(axis=3, keepdims=True)).astype(xd.dtype, copy=False)

    def backward_fn(g):
        dot = (g * out_data).sum(axis=3, keepdims=True)
        return (out_data * (g - dot),)

    return _make(out_data, (x,), backward_fn)


# -- normalization and pooling ------------------------------------------------------------


def channel_layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each (batch, y, x) position across channels to zero mean, unit variance.

    No learned affine: scale and shift are applied by the caller when needed.
    """
    xd = x.data
    c = xd.shape[1]
    mu = xd.mean(axis=1, keepdims=True)
    centered = xd - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    inv = inv.astype(xd.dtype, copy=False)
    out_data = centered * inv

    def backward_fn(g):
        gmean = g.mean(axis=1, keepdims=True)
        gy = (g * out_data).mean(axis=1, keepdims=True)
        return (inv * (g - gmean - out_data * gy),)

    return _make(out_data, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes, keeping shape (n, c, 1, 1)."""
    return x.mean(axis=(2, 3))


# -- pixel resampling ----------------------------------------------------------------------


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Fold each r x r spatial block into channels (space-to-depth).

    Output channel index is c_in * r^2 + r * (row mod r) + (col mod r).
    """
    n, c, h, w = x.shape
    if r < 1:
        raise UsageError(f"resample factor must be >= 1, got {r}")
    if h % r or w % r:
        raise DimensionError(f"spatial dims ({h}, {w}) not divisible by factor {r}")
    out_data = (
        x.data.reshape(n, c, h // r, r, w // r, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, h // r, w // r)
    )
    out_data = np.ascontiguousarray(out_data)

    def backward_fn(g):
        gx = (
            g.reshape(n, c, r, r, h // r, w // r)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(gx),)

    return _make(out_data, (x,), backward_fn)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Spread channel groups of size r^2 back over an r x r spatial block (depth-to-space)."""
    n, c, h, w = x.shape
    if r < 1:
        raise UsageError(f"resample factor must be >= 1, got {r}")
    if c % (r * r):
        raise DimensionError(f"channels ({c}) not divisible by factor^2 ({r * r})")
    c_out = c // (r * r)
    out_data = (
        x.data.reshape(n, c_out, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c_out, h * r, w * r)
    )
    out_data = np.ascontiguousarray(out_data)

    def backward_fn(g):
        gx = (
            g.reshape(n, c_out, h, r, w, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(gx),)

    return _make(out_data, (x,), backward_fn)


# -- convolution ------------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with stride, symmetric zero padding, and channel groups.

    weight has shape (c_out, c_in // groups, k_h, k_w); bias, when given, has
    shape (1, c_out, 1, 1).  Inputs are checked for finiteness so a diverging
    model fails loudly here rather than propagating NaNs.
    """
    n, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if stride < 1:
        raise UsageError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise UsageError(f"padding must be >= 0, got {padding}")
    if groups < 1 or c_in % groups or c_out % groups:
        raise DimensionError(
            f"groups ({groups}) must divide both c_in ({c_in}) and c_out ({c_out})"
        )
    if c_in_g != c_in // groups:
        raise DimensionError(
            f"weight expects {c_in_g} channels per group, input provides {c_in // groups}"
        )
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        raise DimensionError(f"bias must have shape (1, {c_out}, 1, 1), got {bias.shape}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(
            f"kernel ({kh}, {kw}) does not fit input ({h}, {w}) with padding {padding}"
        )
    if not np.isfinite(x.data).all() or not np.isfinite(weight.data).all():
        raise NumericError("conv2d received non-finite values")

    _record_macs(n * c_out * c_in_g * kh * kw * h_out * w_out)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0 and groups == 1:
        out = _conv1x1(x, weight, bias)
    elif (
        groups == c_in
        and c_out == c_in
        and stride == 1
        and kh == kw
        and padding == (kh - 1) // 2
        and kh % 2 == 1
    ):
        out = _conv_depthwise_same(x, weight, bias)
    else:
        out = _conv_general(x, weight, bias, stride, padding, groups, h_out, w_out)
    return out


def _bias_backward(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0, 2, 3), keepdims=True)


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Pointwise convolution as a single matrix product."""
    n, c_in, h, w = x.shape
    c_out = weight.shape[0]
    xm = x.data.reshape(n, c_in, h * w)
    wm = weight.data.reshape(c_out, c_in)
    out_data = np.matmul(wm, xm).reshape(n, c_out, h, w)
    if bias is not None:
        out_data = out_data + bias.data

    def backward_fn(g):
        gm = g.reshape(n, c_out, h * w)
        gx = np.matmul(wm.T, gm).reshape(n, c_in, h, w)
        gw = np.matmul(gm, xm.swapaxes(1, 2)).sum(axis=0).reshape(weight.shape)
        gb = _bias_backward(g) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward_fn)


def _conv_depthwise_same(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Depthwise odd-kernel same-padding convolution via shifted accumulation."""
    n, c, h, w = x.shape
    k = weight.shape[2]
    p = (k - 1) // 2
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p : p + h, p : p + w] = x.data
    out_data = np.zeros((n, c, h, w), dtype=x.dtype)
    wd = weight.data
    for dy in range(k):
        for dx in range(k):
            out_data += wd[:, 0, dy, dx][None, :, None, None] * xp[:, :, dy : dy + h, dx : dx + w]
    if bias is not None:
        out_data += bias.data

    def backward_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for dy in range(k):
            for dx in range(k):
                patch = xp[:, :, dy : dy + h, dx : dx + w]
                gw[:, 0, dy, dx] = np.einsum("nchw,nchw->c", g, patch)
                gxp[:, :, dy : dy + h, dx : dx + w] += (
                    wd[:, 0, dy, dx][None, :, None, None] * g
                )
        gx = np.ascontiguousarray(gxp[:, :, p : p + h, p : p + w])
        gb = _bias_backward(g) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward_fn)


def _conv_general(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    stride: int,
    padding: int,
    groups: int,
    h_out: int,
    w_out: int,
) -> Tensor:
    n, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    cg_out = c_out // groups

    if padding:
        xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    # im2col: windows (n, c_in, h_out, w_out, kh, kw) gathered into GEMM columns
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    L = h_out * w_out
    cols = np.ascontiguousarray(
        windows.reshape(n, groups, c_in_g, h_out, w_out, kh, kw).transpose(0, 1, 2, 5, 6, 3, 4)
    ).reshape(n, groups, c_in_g * kh * kw, L)
    kg = weight.data.reshape(groups, cg_out, c_in_g * kh * kw)
    out_data = np.matmul(kg, cols).reshape(n, c_out, h_out, w_out)
    if bias is not None:
        out_data += bias.data

    def backward_fn(g):
        gg = g.reshape(n, groups, cg_out, L)
        gw = np.matmul(gg, cols.swapaxes(2, 3)).sum(axis=0).reshape(weight.shape)

        # Spread grad over input positions: for each kernel offset the output
        # grid maps to a strided slice of the padded input, disjoint within
        # that offset, so plain += suffices.
        gcol = np.matmul(kg.swapaxes(1, 2), gg).reshape(n, c_in, kh, kw, h_out, w_out)
        gxp = np.zeros_like(xp)
        for dy in range(kh):
            ys = slice(dy, dy + (h_out - 1) * stride + 1, stride)
            for dx in range(kw):
                xs = slice(dx, dx + (w_out - 1) * stride + 1, stride)
                gxp[:, :, ys, xs] += gcol[:, :, dy, dx]
        if padding:
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w])
        else:
            gx = gxp
        gb = _bias_backward(g) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward_fn)


# -- numeric gradient oracle -----------------------------------------------------------------------


def finite_diff_grad(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar-valued fn at x.

    Perturbs one coordinate at a time; use float64 inputs for trustworthy
    results.  Exists as an independent check on the analytic backward pass.
    """
    base = x.data.astype(np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(Tensor(base.astype(x.dtype))).item()
            flat[i] = orig - step
            lo = fn(Tensor(base.astype(x.dtype))).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return grad
