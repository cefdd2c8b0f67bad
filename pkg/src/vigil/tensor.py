"""Dense f64 tensors with reverse-mode automatic differentiation.

Every downstream module computes exclusively through the ops defined here.
Tensors wrap row-major numpy arrays. Gradient recording is opt-in: ops
append nodes to the thread-local active ``Tape`` (opened with a ``with``
block) whenever an input is trainable or itself tape-produced; without an
active tape the ops are plain numpy and cost nothing extra.

All arithmetic is f64. Finite-difference verification is unreliable in f32
and this library exists to be verified, so there is no precision knob.
"""

from __future__ import annotations

import math
import os
import threading

import numpy as np
from scipy.special import erf

from .errors import NumericalError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Debug toggle: when enabled, every op re-checks its output for NaN/Inf.
_finite_checks = os.environ.get("VIGIL_CHECK_FINITE", "") not in ("", "0")


def set_finite_checks(enabled):
    """Enable/disable per-op output finiteness assertions (debug aid)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def finite_checks_enabled():
    return _finite_checks


def _require_finite(arr, context):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{context}: non-finite values encountered")


class Tensor:
    """N-dimensional f64 value, optionally carrying an accumulated gradient.

    ``requires_grad`` marks trainable leaves; intermediate op outputs are
    tracked through the active tape instead. Data is validated finite at
    construction; op outputs are re-validated only in debug mode.
    """

    __slots__ = ("data", "grad", "requires_grad", "_taped")

    def __init__(self, data, requires_grad=False):
        # note: asarray keeps 0-d scalars 0-d (ascontiguousarray would not)
        arr = np.asarray(data, dtype=np.float64, order="C")
        _require_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._taped = False

    @classmethod
    def _result(cls, arr, context="op"):
        # Internal fast path for op outputs: skips the finiteness scan
        # unless debug checks are on.
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._taped = False
        if _finite_checks:
            _require_finite(arr, context)
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        head = np.array2string(self.data, precision=4, threshold=16)
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, data={head})"

    # Operator sugar; all routing goes through the module-level ops.
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

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp", "needs")

    def __init__(self, out, inputs, vjp, needs):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.needs = needs


_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of differentiable ops; consumed by one backward pass.

    Nodes are appended in execution order, which is a topological order by
    construction (an op's inputs exist before it runs). Use as a context
    manager; tapes on distinct threads are independent.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        if getattr(_tls, "tape", None) is not None:
            raise RuntimeError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out, inputs, vjp, needs):
        self._nodes.append(_Node(out, inputs, vjp, needs))
        out._taped = True

    def backward(self, loss):
        """Reverse-accumulate d(loss)/d(param) into each parameter's grad.

        ``loss`` must be a scalar recorded on this tape. Parameter grads
        accumulate (+=) across backward calls on separate tapes; detached
        inputs are skipped silently. A tape can be consumed only once.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {getattr(loss, 'shape', None)}")
        if not any(node.out is loss for node in self._nodes):
            raise ValueError("loss is not the output of any op recorded on this tape")
        self._consumed = True

        # d(loss)/d(loss) = 1, then walk nodes in reverse creation order.
        flowing = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = flowing.pop(id(node.out), None)
            if g is None:
                continue
            for t, gt in zip(node.inputs, node.vjp(g, node.needs)):
                if gt is None:
                    continue
                if t._taped:
                    prev = flowing.get(id(t))
                    flowing[id(t)] = gt if prev is None else prev + gt
                elif t.requires_grad:
                    t.grad = gt.copy() if t.grad is None else t.grad + gt
        self._nodes = []


def backward(tape, loss):
    """Functional alias for ``tape.backward(loss)``."""
    tape.backward(loss)


def _record(out, inputs, vjp):
    tape = _active_tape()
    if tape is None:
        return
    needs = tuple(t.requires_grad or t._taped for t in inputs)
    if any(needs):
        tape._record(out, inputs, vjp, needs)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / broadcast arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._result(a.data + b.data, "add")

    def vjp(g, needs):
        ga = _unbroadcast(g, a.data.shape) if needs[0] else None
        gb = _unbroadcast(g, b.data.shape) if needs[1] else None
        return ga, gb

    _record(out, (a, b), vjp)
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._result(a.data - b.data, "sub")

    def vjp(g, needs):
        ga = _unbroadcast(g, a.data.shape) if needs[0] else None
        gb = _unbroadcast(-g, b.data.shape) if needs[1] else None
        return ga, gb

    _record(out, (a, b), vjp)
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._result(a.data * b.data, "mul")

    def vjp(g, needs):
        ga = _unbroadcast(g * b.data, a.data.shape) if needs[0] else None
        gb = _unbroadcast(g * a.data, b.data.shape) if needs[1] else None
        return ga, gb

    _record(out, (a, b), vjp)
    return out


def neg(a):
    a = _as_tensor(a)
    out = Tensor._result(-a.data, "neg")
    _record(out, (a,), lambda g, needs: (-g,))
    return out


# ---------------------------------------------------------------------------
# matmul


def _swap_last2(arr):
    return np.swapaxes(arr, -1, -2)


def matmul(a, b):
    """Batched matrix product: [..,M,K] x [..,K,N] -> [..,M,N].

    Trailing dims must conform; leading batch dims broadcast. No other
    implicit broadcasting exists anywhere in this library.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform: {e}") from None
    out = Tensor._result(out_data, "matmul")

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, _swap_last2(b.data)), a.data.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(_swap_last2(a.data), g), b.data.shape)
        return ga, gb

    _record(out, (a, b), vjp)
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a):
    a = _as_tensor(a)
    out = Tensor._result(np.maximum(a.data, 0.0), "relu")

    def vjp(g, needs):
        return (g * (a.data > 0.0),)

    _record(out, (a,), vjp)
    return out


def gelu(a):
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = Tensor._result(a.data * phi, "gelu")

    def vjp(g, needs):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (phi + a.data * pdf),)

    _record(out, (a,), vjp)
    return out


def log(a):
    a = _as_tensor(a)
    out = Tensor._result(np.log(a.data), "log")

    def vjp(g, needs):
        return (g / a.data,)

    _record(out, (a,), vjp)
    return out


def clamp_min(a, floor):
    """Elementwise max(a, floor); gradient passes where a >= floor."""
    a = _as_tensor(a)
    out = Tensor._result(np.maximum(a.data, floor), "clamp_min")

    def vjp(g, needs):
        return (g * (a.data >= floor),)

    _record(out, (a,), vjp)
    return out


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``; slices sum to one.

    Always subtracts the slice max before exponentiating, so extreme but
    finite inputs never overflow.
    """
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._result(y, "softmax")

    def vjp(g, needs):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    _record(out, (x,), vjp)
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine.

    gamma and beta are 1-D of extent D == x.shape[-1]; variance is the
    population variance of each slice.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must both be ({d},) for input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._result(xhat * gamma.data + beta.data, "layer_norm")

    def vjp(g, needs):
        gx = ggamma = gbeta = None
        if needs[1]:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if needs[0]:
            gxhat = g * gamma.data
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
        return gx, ggamma, gbeta

    _record(out, (x, gamma, beta), vjp)
    return out


def max_pool_1d(x):
    """Columnwise max over the sequence axis: [T,D] -> [D].

    Gradient routes to the first maximal index of each column.
    """
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"max_pool_1d expects a [T,D] tensor, got {x.shape}")
    t, d = x.shape
    if t < 1:
        raise ValueError("max_pool_1d: empty sequence")
    idx = x.data.argmax(axis=0)  # first max on ties
    out = Tensor._result(x.data[idx, np.arange(d)], "max_pool_1d")

    def vjp(g, needs):
        gx = np.zeros_like(x.data)
        gx[idx, np.arange(d)] = g
        return (gx,)

    _record(out, (x,), vjp)
    return out


def dropout(x, p, train, rng=None):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode is the identity. The mask is drawn from ``rng`` (required in
    train mode when p > 0) and captured for the backward pass.
    """
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode requires a seeded generator")
    scale = 1.0 / (1.0 - p)
    mask = (rng.random(x.shape) >= p) * scale
    out = Tensor._result(x.data * mask, "dropout")

    def vjp(g, needs):
        return (g * mask,)

    _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# reductions


def _sum_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    axes = _sum_axes(axis, x.ndim)
    out = Tensor._result(x.data.sum(axis=axes, keepdims=keepdims), "sum")

    def vjp(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, x.data.shape).copy(),)

    _record(out, (x,), vjp)
    return out


def tmean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    axes = _sum_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = Tensor._result(x.data.mean(axis=axes, keepdims=keepdims), "mean")

    def vjp(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, x.data.shape) / count,)

    _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# shape surgery


def reshape(x, shape):
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor._result(np.ascontiguousarray(x.data.reshape(shape)), "reshape")

    def vjp(g, needs):
        return (g.reshape(x.data.shape),)

    _record(out, (x,), vjp)
    return out


def transpose(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor._result(np.ascontiguousarray(x.data.transpose(axes)), "transpose")

    def vjp(g, needs):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    _record(out, (x,), vjp)
    return out


def swap_last2(x):
    x = _as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def roll(x, shifts, axes):
    """Toroidal roll along the given axes (shifts taken mod extents)."""
    x = _as_tensor(x)
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(int(a) for a in axes)
    out = Tensor._result(np.roll(x.data, shifts, axes), "roll")

    def vjp(g, needs):
        return (np.roll(g, tuple(-s for s in shifts), axes),)

    _record(out, (x,), vjp)
    return out


def zero_pad(x, pads):
    """Zero-pad with (before, after) per axis; gradient crops back."""
    x = _as_tensor(x)
    pads = tuple((int(lo), int(hi)) for lo, hi in pads)
    if len(pads) != x.ndim:
        raise ShapeError(f"zero_pad: {len(pads)} pad pairs for rank-{x.ndim} tensor")
    out = Tensor._result(np.pad(x.data, pads), "zero_pad")
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape))

    def vjp(g, needs):
        return (np.ascontiguousarray(g[slices]),)

    _record(out, (x,), vjp)
    return out


def crop(x, pads):
    """Inverse of zero_pad: drop (before, after) per axis; gradient re-pads."""
    x = _as_tensor(x)
    pads = tuple((int(lo), int(hi)) for lo, hi in pads)
    if len(pads) != x.ndim:
        raise ShapeError(f"crop: {len(pads)} pad pairs for rank-{x.ndim} tensor")
    slices = tuple(slice(lo, n - hi) for (lo, hi), n in zip(pads, x.shape))
    out = Tensor._result(np.ascontiguousarray(x.data[slices]), "crop")

    def vjp(g, needs):
        return (np.pad(g, pads),)

    _record(out, (x,), vjp)
    return out


def index_select(x, indices, axis=0):
    """Gather rows along ``axis``; gradient scatter-adds back."""
    x = _as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    out = Tensor._result(np.take(x.data, indices, axis=axis), "index_select")
    loc = tuple([slice(None)] * (axis % x.ndim) + [indices])

    def vjp(g, needs):
        gx = np.zeros_like(x.data)
        np.add.at(gx, loc, g)
        return (gx,)

    _record(out, (x,), vjp)
    return out


def extract_patches(x, ksize, stride):
    """im2col for [B,H,W,C] inputs -> [B,Ho,Wo,kh*kw*C] patch rows.

    Patch vectors are flattened in (kh, kw, C) row-major order; the
    gradient scatter-adds each patch element back to its source pixel.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"extract_patches expects [B,H,W,C], got {x.shape}")
    kh, kw = ksize
    b, h, w, c = x.shape
    if h < kh or w < kw:
        raise ShapeError(f"extract_patches: kernel {ksize} larger than input {h}x{w}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    rows = stride * np.arange(ho)[:, None, None, None] + np.arange(kh)[None, None, :, None]
    cols = stride * np.arange(wo)[None, :, None, None] + np.arange(kw)[None, None, None, :]
    flat_idx = (rows * w + cols).reshape(-1)  # (Ho*Wo*kh*kw,)
    xf = x.data.reshape(b, h * w, c)
    out = Tensor._result(
        np.ascontiguousarray(xf[:, flat_idx, :].reshape(b, ho, wo, kh * kw * c)),
        "extract_patches",
    )

    def vjp(g, needs):
        gf = np.zeros((b, h * w, c))
        np.add.at(gf, (slice(None), flat_idx), g.reshape(b, flat_idx.size, c))
        return (gf.reshape(b, h, w, c),)

    _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# verification


def grad_check(f, params, eps=1e-4, samples=50, rng=None, sabotage=False):
    """Compare taped gradients of a scalar function against central differences.

    ``f`` takes no arguments and returns a scalar Tensor computed from the
    live values of ``params``; it must be deterministic (dropout forced to
    eval mode by the caller). Up to ``samples`` coordinates are drawn across
    all parameters; for each, the analytic gradient is compared against
    (f(p+eps) - f(p-eps)) / (2 eps) with relative error
    |a - n| / max(|a|, |n|, 1e-8). Returns the worst error observed; the
    caller applies the threshold.

    ``sabotage`` corrupts one analytic value before comparing — a negative
    control proving the check can fail.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    sizes = [p.size for p in params]
    total = int(sum(sizes))
    if total == 0:
        return 0.0
    if rng is None:
        rng = np.random.default_rng(0)
    k = min(int(samples), total)
    coords = np.sort(rng.choice(total, size=k, replace=False))
    bounds = np.cumsum(sizes)

    worst = 0.0
    for which, c in enumerate(coords):
        i = int(np.searchsorted(bounds, c, side="right"))
        j = int(c - (bounds[i - 1] if i > 0 else 0))
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = float(f().data)
        flat[j] = orig - eps
        f_minus = float(f().data)
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[i].reshape(-1)[j])
        if sabotage and which == 0:
            a += 1.0
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
