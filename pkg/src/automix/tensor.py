"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations executed while recording is enabled append to a module-level tape
(one tape per execution context; rebuilt per training step via
:func:`reset_tape`). :func:`backward` sweeps the tape in reverse, accumulates
gradients additively across fan-out, and returns the per-call gradient map so
callers can attribute gradients to individual loss terms.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ParameterError

Array = np.ndarray

_tape: list["_TapeRecord"] = []
_generation = 0
_recording = True


class _TapeRecord:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: "Tensor", inputs: tuple["Tensor", ...],
                 backward_fn: Callable[[Array], tuple[Array | None, ...]]):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


def reset_tape() -> None:
    """Drop all recorded operations and invalidate nodes of earlier generations."""
    global _tape, _generation
    _tape = []
    _generation += 1


def tape_length() -> int:
    return len(_tape)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block; values are still computed."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


class Tensor:
    """Immutable dense array, optionally a node of the active tape.

    ``grad`` is populated (accumulated) by :func:`backward` for tensors created
    with ``requires_grad=True``. A tensor with neither ``requires_grad`` nor a
    node on the current tape is detached and receives no gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_node")

    # Keep numpy from consuming Tensors in mixed expressions; reflected
    # operators below handle ndarray-on-the-left.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.tape_node: tuple[int, int] | None = None

    # -- structure ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def attached(self) -> bool:
        """True when this tensor participates in gradient computation."""
        if self.requires_grad:
            return True
        node = self.tape_node
        return node is not None and node[0] == _generation

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __abs__(self):
        return absolute(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    # -- reductions / views --------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _record(out: Tensor, inputs: tuple[Tensor, ...],
            backward_fn: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    if _recording and any(t.attached() for t in inputs):
        _tape.append(_TapeRecord(out, inputs, backward_fn))
        out.tape_node = (_generation, len(_tape) - 1)
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward_fn(g: Array):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def backward_fn(g: Array):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    need_a, need_b = a.attached(), b.attached()

    def backward_fn(g: Array):
        return (_unbroadcast(g * b.data, a.data.shape) if need_a else None,
                _unbroadcast(g * a.data, b.data.shape) if need_b else None)

    return _record(out, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def backward_fn(g: Array):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    if not isinstance(exponent, (int, float)):
        raise ParameterError("power exponent must be a plain number")
    p = float(exponent)
    out = Tensor(a.data ** p)

    def backward_fn(g: Array):
        return (g * p * a.data ** (p - 1.0),)

    return _record(out, (a,), backward_fn)


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e)
    return _record(out, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise logistic 1/(1+e^-x), computed without overflow on either tail."""
    d = a.data
    s = np.empty_like(d)
    positive = d >= 0
    s[positive] = 1.0 / (1.0 + np.exp(-d[positive]))
    e = np.exp(d[~positive])
    s[~positive] = e / (1.0 + e)
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# matrix products
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul needs [m,k] x [k,n], got {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    need_a, need_b = a.attached(), b.attached()

    def backward_fn(g: Array):
        return (g @ b.data.T if need_a else None,
                a.data.T @ g if need_b else None)

    return _record(out, (a, b), backward_fn)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product, [B,m,k] x [B,k,n] -> [B,m,n]."""
    if (a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise DimensionError(f"bmm needs [B,m,k] x [B,k,n], got {a.shape} and {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    need_a, need_b = a.attached(), b.attached()

    def backward_fn(g: Array):
        return (np.matmul(g, b.data.transpose(0, 2, 1)) if need_a else None,
                np.matmul(a.data.transpose(0, 2, 1), g) if need_b else None)

    return _record(out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# convolution / resampling / layout
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of [N,C,H,W] with kernels [F,C,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}/{padding}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [n,c,ho,wo,kh,kw]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, c * kh * kw)
    out = Tensor((cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    need_x, need_w = x.attached(), w.attached()

    def backward_fn(g: Array):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        gw = (g2.T @ cols).reshape(f, c, kh, kw) if need_w else None
        gx = None
        if need_x:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return _record(out, (x, w), backward_fn)


_INTERP_CACHE: dict[tuple[int, int], Array] = {}


def _interp_matrix(n_in: int, factor: int) -> Array:
    """Row-stochastic bilinear interpolation matrix [n_in*factor, n_in].

    Uses half-pixel centers (align-corners=false); edge samples clamp.
    """
    key = (n_in, factor)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    n_out = n_in * factor
    rows = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = (o + 0.5) / factor - 0.5
        i0 = math.floor(src)
        t = src - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        rows[o, lo] += 1.0 - t
        rows[o, hi] += t
    _INTERP_CACHE[key] = rows
    return rows


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"upsample_bilinear expects [N,C,h,w], got {x.shape}")
    if int(factor) != factor or factor < 1:
        raise ParameterError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    _, _, h, w = x.shape
    ry = _interp_matrix(h, factor)
    rx = _interp_matrix(w, factor)
    out = Tensor(np.einsum("oh,pw,nchw->ncop", ry, rx, x.data, optimize=True))

    def backward_fn(g: Array):
        return (np.einsum("oh,pw,ncop->nchw", ry, rx, g, optimize=True),)

    return _record(out, (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError(f"concat_channels expects 4-d tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    c1 = a.shape[1]
    out = Tensor(np.concatenate((a.data, b.data), axis=1))

    def backward_fn(g: Array):
        return g[:, :c1], g[:, c1:]

    return _record(out, (a, b), backward_fn)


def take(x: Tensor, indices) -> Tensor:
    """Gather rows along the batch axis; backward scatter-adds (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ParameterError(f"take expects a 1-d index array, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ParameterError(f"take indices out of range for batch {x.shape[0]}")
    out = Tensor(x.data[idx])

    def backward_fn(g: Array):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (x,), backward_fn)


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))
    return _record(out, (x,), lambda g: (g.transpose(inverse),))


# ---------------------------------------------------------------------------
# reductions and normalizers
# ---------------------------------------------------------------------------

def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.data.shape

    def backward_fn(g: Array):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape),)

    return _record(out, (x,), backward_fn)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    shape = x.data.shape
    count = x.data.size if axis is None else x.data.size // out.data.size

    def backward_fn(g: Array):
        if axis is None:
            return (np.broadcast_to(g / count, shape),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, shape),)

    return _record(out, (x,), backward_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis; each row becomes a probability vector."""
    if x.ndim < 1:
        raise DimensionError("softmax_rows needs at least one axis")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def backward_fn(g: Array):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return ((g - dot) * s,)

    return _record(out, (x,), backward_fn)


def log_softmax(x: Tensor) -> Tensor:
    """log softmax along the last axis, stabilized by max subtraction."""
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(ls)

    def backward_fn(g: Array):
        return (g - np.exp(ls) * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), backward_fn)


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical tensor with no tape linkage; blocks all upstream gradient."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# backward sweep and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, Array]:
    """Reverse sweep from ``loss``; returns this call's gradient per tensor.

    Gradients accumulate additively across fan-out within the call and into
    ``.grad`` of every ``requires_grad`` tensor across calls (two backwards on
    the same tape therefore equal one backward of the summed losses).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.tape_node
    if node is None or node[0] != _generation:
        raise ContractError("loss is not on the active tape")

    grads: dict[Tensor, Array] = {loss: np.ones_like(loss.data)}
    for record in reversed(_tape[:node[1] + 1]):
        g_out = grads.get(record.out)
        if g_out is None:
            continue
        partials = record.backward_fn(g_out)
        for tensor, g in zip(record.inputs, partials):
            if g is None or not tensor.attached():
                continue
            held = grads.get(tensor)
            grads[tensor] = np.array(g, dtype=np.float64, copy=True) if held is None else held + g
    for tensor, g in grads.items():
        if tensor.requires_grad:
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
    return grads


def clear_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between analytic gradient of f at x and central differences.

    Per coordinate: |analytic - numeric| / max(1, |numeric|), where numeric is
    (f(x + h e_i) - f(x - h e_i)) / (2 h).
    """
    if h <= 0:
        raise ParameterError(f"grad_check step must be positive, got {h}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    analytic = backward(out).get(probe)
    if analytic is None:
        analytic = np.zeros_like(probe.data)
    analytic = analytic.reshape(-1)

    base = probe.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(base.size):
            plus = base.copy()
            plus[i] += h
            minus = base.copy()
            minus[i] -= h
            f_plus = f(Tensor(plus.reshape(probe.data.shape))).item()
            f_minus = f(Tensor(minus.reshape(probe.data.shape))).item()
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
