"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Tensors are dense row-major float arrays (float32 by default, float64 where a
computation asks for it). Every differentiable operation records its parents
and a backward closure; ``Tensor.backward`` walks the recorded graph once in
reverse topological order and accumulates gradients into ``.grad``.

Broadcasting is deliberately restricted: binary operations accept equal
shapes, a Python scalar, or an operand whose shape is a trailing suffix of the
other's (leading-dimension batching, e.g. a bias added to ``[..., d]``).
Anything richer must go through an explicit ``broadcast_to``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _sp

from .errors import GradCheckError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array participating in reverse-mode gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] | None = None
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = None
            out._backward = None
        return out

    # -- basic properties ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ShapeError(f"item() requires a single element, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def is_leaf(self) -> bool:
        return self._parents is None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- backward pass -----------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate gradients of ``self`` w.r.t. every reachable tensor.

        Each node in the recorded graph is visited exactly once. Tensors that
        do not contribute to ``self`` are never touched (their ``.grad`` stays
        ``None``, i.e. exactly zero).
        """
        if not self.requires_grad:
            raise ShapeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._parents is not None:
                for p in node._parents:
                    if p.requires_grad and id(p) not in visited:
                        stack.append((p, False))

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg)
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                prev = pending.get(id(parent))
                pending[id(parent)] = pg if prev is None else prev + pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def cast(self, dtype):
        return cast(self, dtype)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# -- broadcasting rules ------------------------------------------------------------


def _is_suffix(small: tuple[int, ...], big: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _check_binary_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or _is_suffix(sa, sb) or _is_suffix(sb, sa):
        return
    raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` (undoing suffix/explicit broadcast)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if gd != sd and sd == 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


def _coerce_pair(a, b, opname: str) -> tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype if np.isscalar(b) or not isinstance(b, (Tensor, np.ndarray)) else None)
    _check_binary_shapes(a, b, opname)
    return a, b


# -- elementwise arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor._result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor._result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = _coerce_pair(a, b, "maximum")
    out = np.maximum(a.data, b.data)

    def backward(g):
        take_a = a.data >= b.data
        return _reduce_to(g * take_a, a.shape), _reduce_to(g * ~take_a, b.shape)

    return Tensor._result(out, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g / (2.0 * out),))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input is interior."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def backward(g):
        mask = (a.data >= lo) & (a.data <= hi)
        return (g * mask,)

    return Tensor._result(out, (a,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _sp.erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return Tensor._result(out.astype(x.dtype, copy=False), (a,), backward)


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def backward(g):
        return (g * sig * (1.0 + x * (1.0 - sig)),)

    return Tensor._result(out, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)

    def backward(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return Tensor._result(out, (a,), backward)


# -- structural ops ---------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._result(out, (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = np.broadcast_to(a.data, shape)
    return Tensor._result(out, (a,), lambda g: (_reduce_to(g, a.shape),))


def cast(a, dtype) -> Tensor:
    a = as_tensor(a)
    dtype = np.dtype(dtype)
    out = a.data.astype(dtype, copy=False)
    return Tensor._result(out, (a,), lambda g: (g,))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=ax))
            for i in range(len(ts))
        )

    return Tensor._result(out, tuple(ts), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    a = as_tensor(a)
    ax = axis if axis >= 0 else a.ndim + axis
    if start < 0 or start + length > a.shape[ax]:
        raise ShapeError(f"narrow: slice [{start}:{start + length}] exceeds dim {a.shape[ax]}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return Tensor._result(out, (a,), backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(g.dtype, copy=False),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax if ax >= 0 else a.ndim + ax for ax in axes)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._result(np.asarray(out), (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra -------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy semantics on the last two axes.

    Leading batch dimensions must match exactly on both operands, or be
    absent on one side (shared weight).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} @ {b.shape}")
    batch_a, batch_b = a.shape[:-2], b.shape[:-2]
    if batch_a != batch_b and batch_a != () and batch_b != ():
        raise ShapeError(f"matmul: batch dims disagree for {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return Tensor._result(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``y = x @ weight + bias`` along the trailing dimension."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-d, got {weight.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape} incompatible with weight {weight.shape}")
    out = np.matmul(x.data, weight.data)
    parents: tuple[Tensor, ...]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        gf = g.reshape(-1, weight.shape[1])
        xf = x.data.reshape(-1, weight.shape[0])
        gx = np.matmul(g, weight.data.T)
        gw = np.matmul(xf.T, gf)
        if bias is not None:
            return gx, gw, gf.sum(axis=0)
        return gx, gw

    return Tensor._result(out, parents, backward)


def embedding_lookup(table, indices) -> Tensor:
    """Row gather: ``out[...] = table[indices[...]]`` with scatter-add backward."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index out of range for table {table.shape}")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return Tensor._result(np.ascontiguousarray(out), (table,), backward)


# -- normalizations and stable reductions ---------------------------------------------------


def logsumexp_lastdim(a) -> Tensor:
    """Numerically stable ``log(sum(exp(x)))`` over the last dimension."""
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=-1, keepdims=True)
    out = (m + np.log(total)).squeeze(-1)

    def backward(g):
        return (g[..., None] * (shifted / total),)

    return Tensor._result(np.asarray(out), (a,), backward)


def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return Tensor._result(out, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-vector standardization over the last dimension, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        # d/dx of (x - mu) * inv with mu, var both functions of x
        mean_g = gx_hat.mean(axis=-1, keepdims=True)
        mean_gx = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - mean_g - xhat * mean_gx)
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return Tensor._result(out, (x, gain, bias), backward)


def rms_norm(x, gain, eps: float = 1e-5) -> Tensor:
    x, gain = as_tensor(x), as_tensor(gain)
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"rms_norm: gain shape {gain.shape} != ({d},)")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv
    out = xhat * gain.data

    def backward(g):
        gx_hat = g * gain.data
        mean_gx = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - xhat * mean_gx)
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return Tensor._result(out, (x, gain), backward)


# -- causal sequence ops -------------------------------------------------------------------


def max_pool_window(x, window: int, pad_value: float = -1e30) -> Tensor:
    """Causal sliding-window channelwise max over the second-to-last axis.

    ``out[..., t, :]`` is the max of ``x[..., max(0, t-window+1) : t+1, :]``
    with positions before 0 treated as ``pad_value``. The gradient routes to
    the lowest-index argmax; if the pad value wins, no gradient flows.
    """
    x = as_tensor(x)
    if window < 1:
        raise ShapeError(f"max_pool_window: window must be >= 1, got {window}")
    if x.ndim < 2:
        raise ShapeError(f"max_pool_window: input must be >= 2-d, got {x.shape}")
    T = x.shape[-2]
    xd = x.data
    if window >= T:
        out, idx = _prefix_max_with_argmax(xd)
    else:
        out = np.empty_like(xd)
        idx = np.empty(xd.shape, dtype=np.int64)
        for t in range(T):
            a = max(0, t - window + 1)
            seg = xd[..., a: t + 1, :]
            out[..., t, :] = seg.max(axis=-2)
            idx[..., t, :] = a + seg.argmax(axis=-2)
    if window > T or (window > 1 and T > 0):
        # pad positions exist for t < window-1; let the pad value win ties
        tgrid = np.arange(T).reshape((1,) * (xd.ndim - 2) + (T, 1))
        padded = tgrid < (window - 1)
        pad_wins = padded & (out <= pad_value)
        out = np.where(pad_wins, pad_value, out)
        idx = np.where(pad_wins, -1, idx)

    def backward(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        flat_g = g.reshape(-1, T, xd.shape[-1])
        flat_gx = gx.reshape(-1, T, xd.shape[-1])
        flat_idx = idx.reshape(-1, T, xd.shape[-1])
        B, _, D = flat_g.shape
        b_ix, t_ix, d_ix = np.meshgrid(
            np.arange(B), np.arange(T), np.arange(D), indexing="ij"
        )
        valid = flat_idx >= 0
        np.add.at(
            flat_gx,
            (b_ix[valid], flat_idx[valid], d_ix[valid]),
            flat_g[valid],
        )
        return (gx,)

    return Tensor._result(out, (x,), backward)


def _prefix_max_with_argmax(xd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative max over axis -2 plus lowest-index argmax per position."""
    out = np.maximum.accumulate(xd, axis=-2)
    T = xd.shape[-2]
    prev = np.empty_like(out)
    prev[..., 0, :] = -np.inf
    prev[..., 1:, :] = out[..., :-1, :]
    is_new = xd > prev  # strict: ties keep the earlier index
    tgrid = np.arange(T).reshape((1,) * (xd.ndim - 2) + (T, 1))
    candidates = np.where(is_new, tgrid, -1)
    idx = np.maximum.accumulate(candidates, axis=-2)
    return out, idx


def causal_depthwise_conv(x, weight) -> Tensor:
    """Depthwise causal 1-d convolution along axis -2.

    ``weight`` has shape [K, C]; output[t, c] = sum_j weight[j, c] *
    x[t - K + 1 + j, c] with zero left padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    K, C = weight.shape
    if x.shape[-1] != C:
        raise ShapeError(f"causal_depthwise_conv: channels {x.shape} vs weight {weight.shape}")
    T = x.shape[-2]
    pad_shape = x.shape[:-2] + (K - 1, C)
    xp = np.concatenate([np.zeros(pad_shape, dtype=x.dtype), x.data], axis=-2)
    out = np.zeros(x.shape, dtype=x.dtype)
    for j in range(K):
        out += xp[..., j: j + T, :] * weight.data[j]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.zeros(weight.shape, dtype=g.dtype)
        for j in range(K):
            gxp[..., j: j + T, :] += g * weight.data[j]
            gw[j] = (g * xp[..., j: j + T, :]).reshape(-1, C).sum(axis=0)
        return gxp[..., K - 1:, :], gw

    return Tensor._result(out, (x, weight), backward)


def ssm_scan(decay, xdt, b_in, c_out) -> Tensor:
    """Data-dependent diagonal state-space recurrence (sequential reference).

    Shapes: decay [L, T, H]; xdt [L, T, H, P]; b_in, c_out [L, T, S].
    Recurrence per head: h_t = decay_t * h_{t-1} + xdt_t (outer) b_t, with
    y_t[h, p] = sum_s c_t[s] * h_t[h, p, s].
    """
    decay, xdt = as_tensor(decay), as_tensor(xdt)
    b_in, c_out = as_tensor(b_in), as_tensor(c_out)
    L, T, H = decay.shape
    P = xdt.shape[-1]
    S = b_in.shape[-1]
    if xdt.shape != (L, T, H, P) or b_in.shape != (L, T, S) or c_out.shape != (L, T, S):
        raise ShapeError(
            f"ssm_scan: inconsistent shapes decay={decay.shape} xdt={xdt.shape} "
            f"b={b_in.shape} c={c_out.shape}"
        )
    need_grad = _grad_enabled and any(
        t.requires_grad for t in (decay, xdt, b_in, c_out)
    )
    y = np.empty((L, T, H, P), dtype=xdt.dtype)
    h = np.zeros((L, H, P, S), dtype=xdt.dtype)
    hs = np.empty((L, T, H, P, S), dtype=xdt.dtype) if need_grad else None
    ad, xd, bd, cd = decay.data, xdt.data, b_in.data, c_out.data
    for t in range(T):
        h = ad[:, t, :, None, None] * h + xd[:, t, :, :, None] * bd[:, t, None, None, :]
        if hs is not None:
            hs[:, t] = h
        y[:, t] = np.einsum("lhps,ls->lhp", h, cd[:, t])

    def backward(g):
        gd = np.zeros((L, T, H), dtype=g.dtype)
        gx = np.zeros((L, T, H, P), dtype=g.dtype)
        gb = np.zeros((L, T, S), dtype=g.dtype)
        gc = np.zeros((L, T, S), dtype=g.dtype)
        lam = np.zeros((L, H, P, S), dtype=g.dtype)
        for t in range(T - 1, -1, -1):
            ht = hs[:, t]
            gc[:, t] = np.einsum("lhp,lhps->ls", g[:, t], ht)
            lam += g[:, t, :, :, None] * cd[:, t, None, None, :]
            h_prev = hs[:, t - 1] if t > 0 else np.zeros_like(ht)
            gd[:, t] = np.einsum("lhps,lhps->lh", lam, h_prev)
            gx[:, t] = np.einsum("lhps,ls->lhp", lam, bd[:, t])
            gb[:, t] = np.einsum("lhps,lhp->ls", lam, xd[:, t])
            lam *= ad[:, t, :, None, None]
        return gd, gx, gb, gc

    return Tensor._result(y, (decay, xdt, b_in, c_out), backward)


def ssm_scan_chunked(decay, xdt, b_in, c_out, chunk: int = 32) -> np.ndarray:
    """Chunked evaluation of the same recurrence as :func:`ssm_scan`.

    Pure-ndarray forward used at inference/verification time; within each
    chunk the contribution is computed with cumulative log-decay products.
    """
    ad = np.asarray(decay, dtype=np.float64)
    xd = np.asarray(xdt, dtype=np.float64)
    bd = np.asarray(b_in, dtype=np.float64)
    cd = np.asarray(c_out, dtype=np.float64)
    L, T, H = ad.shape
    P = xd.shape[-1]
    S = bd.shape[-1]
    y = np.empty((L, T, H, P), dtype=np.float64)
    h = np.zeros((L, H, P, S), dtype=np.float64)
    log_a = np.log(ad)
    for start in range(0, T, chunk):
        end = min(start + chunk, T)
        Q = end - start
        la = log_a[:, start:end]                      # [L, Q, H]
        cum = np.cumsum(la, axis=1)                   # prod a_{start..t}
        seg = cum[:, :, None, :] - cum[:, None, :, :]  # [L, Q(t), Q(s), H]
        mask = np.tril(np.ones((Q, Q)))[None, :, :, None]
        L_mat = np.exp(seg) * mask
        cb = np.einsum("lts,lqs->ltq", cd[:, start:end], bd[:, start:end])  # C_t . B_s
        y_intra = np.einsum("ltq,ltqh,lqhp->lthp", cb, L_mat, xd[:, start:end])
        carry_decay = np.exp(cum)                     # [L, Q, H]
        hC = np.einsum("lhps,lts->lthp", h, cd[:, start:end])
        y[:, start:end] = y_intra + carry_decay[:, :, :, None] * hC
        tail = np.exp(cum[:, -1:, :] - cum)           # prod a_{t+1..end-1}
        h = h * np.exp(cum[:, -1])[:, :, None, None] + np.einsum(
            "lqh,lqhp,lqs->lhps", tail, xd[:, start:end], bd[:, start:end]
        )
    return y


def ssm_scan_step(h, decay_t, xdt_t, b_t, c_t):
    """Single recurrence step on raw arrays; returns (y_t, new_h)."""
    h = decay_t[:, :, None, None] * h + xdt_t[:, :, :, None] * b_t[:, None, None, :]
    y = np.einsum("lhps,ls->lhp", h, c_t)
    return y, h


# -- finite-difference verification ------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of a scalar ``f()`` against central differences.

    All parameter data is temporarily promoted to float64 so the comparison is
    made in double precision. Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``. Large parameter sets can be
    subsampled via ``max_coords_per_param`` (deterministic under ``rng``).
    """
    saved = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
        out = f()
        if out.data.size != 1:
            raise GradCheckError(f"grad_check target must be scalar, got shape {out.shape}")
        if not np.isfinite(out.data).all():
            raise GradCheckError("grad_check: objective is non-finite at the base point")
        for p in params:
            p.zero_grad()
        out.backward()
        analytic = [
            np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
        ]

        worst = 0.0
        for k, p in enumerate(params):
            flat = p.data.reshape(-1)
            n = flat.size
            if max_coords_per_param is not None and n > max_coords_per_param:
                gen = rng if rng is not None else np.random.default_rng(0)
                coords = gen.choice(n, size=max_coords_per_param, replace=False)
            else:
                coords = range(n)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                with no_grad():
                    fp = float(f().data.reshape(-1)[0])
                flat[i] = orig - step
                with no_grad():
                    fm = float(f().data.reshape(-1)[0])
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise GradCheckError(
                        f"grad_check: non-finite objective at parameter {k}, coordinate {i}"
                    )
                numeric = (fp - fm) / (2.0 * step)
                err = abs(analytic[k].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
        return worst
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.zero_grad()
