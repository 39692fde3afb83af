"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 for verification
work). Operations executed while a :class:`Tape` is active are recorded;
``backward`` replays the recording in reverse to accumulate gradients
into every ``requires_grad`` tensor that participated.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DimensionError

DEFAULT_DTYPE = np.float32

__all__ = [
    "Tensor", "Tape", "backward", "no_grad",
    "add", "sub", "mul", "div", "neg", "absolute", "exp", "log", "sqrt",
    "relu", "sigmoid", "clip", "reshape", "transpose", "broadcast_to",
    "concat", "sum_", "mean_", "max_", "min_", "matmul", "conv1x1",
    "conv3x3", "batch_norm", "global_average_pool", "softmax",
    "masked_softmax", "BatchNormStats",
]


class Tensor:
    """A dense n-dimensional array that can participate in a gradient tape.

    ``grad`` is lazily allocated and always matches ``data`` in shape.
    ``data`` is never mutated by operations; optimizers update it in
    place between steps.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are wrapped at the tensor's dtype so that
    # float32 graphs are not silently promoted to float64
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


class Tape:
    """Ordered record of operations for one reverse-mode sweep.

    Used as a context manager; operations executed inside the ``with``
    block are appended in execution order. ``backward`` replays the list
    in reverse, visiting each recorded node exactly once. A cleared tape
    propagates nothing.
    """

    def __init__(self):
        self._nodes: list = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> None:
        self._nodes.append((out, tuple(inputs), rule))

    def clear(self) -> None:
        self._nodes.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every participant."""
        if loss.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data) if loss.grad is None \
            else loss.grad + np.ones_like(loss.data)
        for out, inputs, rule in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            # reverse order guarantees every contribution to `out` has
            # landed by now; consume it so repeated sweeps stay correct
            out.grad = None
            for t, gt in zip(inputs, rule(g)):
                if gt is None or not t.requires_grad:
                    continue
                t.grad = gt if t.grad is None else t.grad + gt


_TAPES: list[Tape] = []


class no_grad:
    """Context that suspends recording (inference / oracle evaluation)."""

    def __enter__(self):
        self._saved = _TAPES[:]
        _TAPES.clear()
        return self

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)


def backward(loss: Tensor) -> None:
    """Run the innermost active tape backwards from ``loss``."""
    if not _TAPES:
        raise ContractViolation("backward called with no active tape")
    _TAPES[-1].backward(loss)


def _apply(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Create the result tensor and record it on the active tape."""
    tape = _TAPES[-1] if _TAPES else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    if needs:
        tape.record(out, inputs, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _apply(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _apply(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _apply(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _apply(out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * out / b.data, b.shape)))


def neg(x: Tensor) -> Tensor:
    return _apply(-x.data, (x,), lambda g: (-g,))


def absolute(x: Tensor) -> Tensor:
    return _apply(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _apply(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _apply(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _apply(out, (x,), lambda g: (g * (0.5 / out),))


def relu(x: Tensor) -> Tensor:
    return _apply(np.maximum(x.data, 0), (x,),
                  lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise 1 / (1 + exp(-x)), computed without overflow."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _apply(out, (x,), lambda g: (g * out * (1.0 - out),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only through unclamped entries."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _apply(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _apply(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply(np.transpose(x.data, axes), (x,),
                  lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _apply(np.broadcast_to(x.data, shape), (x,),
                  lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _apply(np.concatenate([t.data for t in tensors], axis=axis),
                  tensors, rule)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if not keepdims and axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _apply(x.data.sum(axis=axis, keepdims=keepdims), (x,),
                  lambda g: (_expand_reduced(g, x.shape, axis, keepdims),))


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    scale = x.data.dtype.type(out.size / x.size)
    return _apply(out, (x,),
                  lambda g: (_expand_reduced(g * scale, x.shape, axis, keepdims),))


def _extreme(x: Tensor, axis: int, keepdims: bool, fn, argfn) -> Tensor:
    out = fn(x.data, axis=axis, keepdims=keepdims)
    idx = argfn(x.data, axis=axis)

    def rule(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis=axis)
        return (gx,)

    return _apply(out, (x,), rule)


def max_(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient routes to the first maximal entry."""
    return _extreme(x, axis, keepdims, np.max, np.argmax)


def min_(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return _extreme(x, axis, keepdims, np.min, np.argmin)


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over every axis but the trailing channel axis."""
    return mean_(x, axis=tuple(range(x.ndim - 1)))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-d or stacked with matching leading dimensions."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _apply(a.data @ b.data, (a, b), rule)


def conv1x1(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Per-position affine map over the trailing channel axis.

    ``x`` is (..., D_in), ``w`` is (D_in, D_out), ``b`` is (D_out,).
    """
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"conv1x1: input channels {x.shape} do not match weights {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"conv1x1: bias {b.shape} vs weights {w.shape}")
        out = out + b.data

    lead = tuple(range(x.ndim - 1))

    def rule(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = None if b is None else g.sum(axis=lead)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _apply(out, (x, w) if b is None else (x, w, b), rule)


def _im2col(x: np.ndarray, stride: int) -> tuple[np.ndarray, int, int]:
    """3x3 patches of a zero-padded (B, H, W, C) array.

    Returns (B*Ho*Wo, 9*C) patch matrix with (kh, kw, c) minor order.
    """
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]            # (B, Ho, Wo, C, 3, 3)
    Ho, Wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, 9 * C)
    return cols, Ho, Wo


def conv3x3(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """3x3 convolution, padding 1, NHWC layout, kernel (3, 3, C_in, C_out)."""
    if x.ndim != 4 or w.shape[:3] != (3, 3, x.shape[-1]):
        raise DimensionError(f"conv3x3: input {x.shape} vs kernel {w.shape}")
    B, H, W, Cin = x.shape
    Cout = w.shape[-1]
    cols, Ho, Wo = _im2col(x.data, stride)
    wf = w.data.reshape(9 * Cin, Cout)
    out = cols @ wf
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, Cout)

    def rule(g):
        gf = g.reshape(-1, Cout)
        gw = (cols.T @ gf).reshape(3, 3, Cin, Cout)
        gcols = (gf @ wf.T).reshape(B, Ho, Wo, 3, 3, Cin)
        gxp = np.zeros((B, H + 2, W + 2, Cin), dtype=g.dtype)
        for kh in range(3):
            for kw in range(3):
                gxp[:, kh:kh + Ho * stride:stride,
                    kw:kw + Wo * stride:stride] += gcols[:, :, :, kh, kw]
        gx = gxp[:, 1:H + 1, 1:W + 1]
        gb = None if b is None else gf.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _apply(out, (x, w) if b is None else (x, w, b), rule)


# ---------------------------------------------------------------------------
# normalization and softmax
# ---------------------------------------------------------------------------

class BatchNormStats:
    """Running mean/variance buffers tracked across training steps."""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over all non-channel axes, then affine.

    Training mode normalizes with batch statistics and updates ``stats``
    in place; evaluation mode normalizes with the tracked statistics.
    """
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"batch_norm: affine {gamma.shape}/{beta.shape} for {D} channels")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean += momentum * (mu.astype(stats.mean.dtype) - stats.mean)
        stats.var += momentum * (var.astype(stats.var.dtype) - stats.var)
    else:
        mu = stats.mean.astype(x.data.dtype)
        var = stats.var.astype(x.data.dtype)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    m = x.size // D

    def rule(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data
        if training:
            gx = (inv / m) * (m * gxhat - gxhat.sum(axis=axes)
                              - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta

    return _apply(out, (x, gamma, beta), rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row softmax with max-subtraction stabilization."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _apply(out, (x,), rule)


def masked_softmax(x: Tensor, active: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to ``active`` positions; inactive outputs are 0.

    ``active`` is a boolean array broadcastable to ``x.shape``. Active
    entries are normalized with max-subtraction over the active set and
    sum to 1 per slice; a slice with no active position yields zeros.
    """
    active = np.asarray(active, dtype=bool)
    if active.shape[-1] != x.shape[axis if axis >= 0 else x.ndim + axis]:
        raise DimensionError(
            f"masked_softmax: mask {active.shape} does not cover axis of {x.shape}")
    active = np.broadcast_to(active, x.shape)
    neg_inf = np.where(active, x.data, -np.inf)
    mx = neg_inf.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(active, np.exp(x.data - mx), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _apply(out, (x,), rule)
