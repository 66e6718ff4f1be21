"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps an ndarray; every operation appends one record to the
``Tape`` its inputs live on, so the record list is a topological order by
construction and ``backward`` replays it in reverse exactly once per node.
The op set is the minimum a small dense-prediction training loop needs.

The free functions (``exp``, ``minimum``, ``conv2d``, ...) and the
ndarray-style methods on ``Tensor`` (``sum``, ``clip``, indexing, operators)
dispatch on input type, so the same formula code runs either on plain numpy
arrays (untracked, fast path) or on tracked tensors.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Array = np.ndarray


class Tape:
    """Ordered record of operations for one forward pass."""

    __slots__ = ("records",)

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple]] = []

    def __len__(self) -> int:
        return len(self.records)


class Tensor:
    """Dense float64 value, optionally tracked on a tape for backward."""

    __slots__ = ("values", "tape", "requires_grad", "grad", "is_leaf")

    # Keep numpy from coercing Tensor operands in `ndarray <op> Tensor`;
    # with this set, numpy returns NotImplemented and Python falls back to
    # the reflected Tensor operator.
    __array_ufunc__ = None

    def __init__(self, values, tape: Tape | None = None,
                 requires_grad: bool = False, is_leaf: bool = False) -> None:
        self.values = np.asarray(values, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.is_leaf = is_leaf

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        flags = "leaf" if self.is_leaf else ("grad" if self.requires_grad else "const")
        return f"Tensor(shape={self.values.shape}, {flags})"

    # arithmetic ------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    # ndarray-style methods so generic code runs on either type -------
    def sum(self, axis=None):
        return _reduce_sum(self, axis)

    def mean(self, axis=None):
        return _reduce_mean(self, axis)

    def max(self, axis=None):
        return _reduce_extremum(self, axis, np.max, np.argmax)

    def min(self, axis=None):
        return _reduce_extremum(self, axis, np.min, np.argmin)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def leaf(values, tape: Tape) -> Tensor:
    """Create a differentiable leaf bound to `tape`."""
    if tape is None:
        raise ValueError("a leaf tensor needs a tape")
    return Tensor(values, tape=tape, requires_grad=True, is_leaf=True)


def constant(values) -> Tensor:
    return Tensor(values)


def values_of(x) -> Array:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _record(out_values: Array, pulls) -> Tensor:
    """Build the output tensor for an op; `pulls` is (input, vjp) pairs."""
    live = [(p, fn) for p, fn in pulls
            if isinstance(p, Tensor) and p.requires_grad]
    if not live:
        return Tensor(out_values)
    tapes = {id(p.tape): p.tape for p, _ in live}
    if len(tapes) != 1:
        raise ValueError("operands recorded on different tapes")
    tape = next(iter(tapes.values()))
    out = Tensor(out_values, tape=tape, requires_grad=True)
    tape.records.append((out, tuple(live)))
    return out


def _tracked(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squash:
        g = g.sum(axis=squash, keepdims=True)
    return g.reshape(shape)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into `.grad` of every requires-grad leaf.

    Repeated calls keep accumulating; clear leaf grads by hand to reset.
    """
    if not isinstance(root, Tensor) or not root.requires_grad:
        raise ValueError("backward root must be a tracked Tensor")
    if root.values.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {root.values.shape}")
    seed = np.ones((), dtype=np.float64)
    if root.is_leaf:
        root.grad = seed if root.grad is None else root.grad + seed
        return
    adjoint: dict[int, Array] = {id(root): seed}
    for out, pulls in reversed(root.tape.records):
        g = adjoint.pop(id(out), None)
        if g is None:
            continue
        for parent, vjp in pulls:
            contrib = vjp(g)
            if parent.is_leaf:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.values)
                parent.grad += contrib
            else:
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = contrib if prev is None else prev + contrib


# ---------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting, gradients summed back)
# ---------------------------------------------------------------------

def add(a, b):
    av, bv = values_of(a), values_of(b)
    out = av + bv
    if not _tracked(a, b):
        return out
    return _record(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                         (b, lambda g: _unbroadcast(g, bv.shape))])


def sub(a, b):
    av, bv = values_of(a), values_of(b)
    out = av - bv
    if not _tracked(a, b):
        return out
    return _record(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                         (b, lambda g: _unbroadcast(-g, bv.shape))])


def mul(a, b):
    av, bv = values_of(a), values_of(b)
    out = av * bv
    if not _tracked(a, b):
        return out
    return _record(out, [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                         (b, lambda g: _unbroadcast(g * av, bv.shape))])


def div(a, b):
    av, bv = values_of(a), values_of(b)
    out = av / bv
    if not _tracked(a, b):
        return out
    return _record(out, [(a, lambda g: _unbroadcast(g / bv, av.shape)),
                         (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape))])


def minimum(a, b):
    """Elementwise minimum; at ties the gradient goes to the first argument."""
    av, bv = values_of(a), values_of(b)
    out = np.minimum(av, bv)
    if not _tracked(a, b):
        return out
    first = av <= bv
    return _record(out, [(a, lambda g: _unbroadcast(np.where(first, g, 0.0), av.shape)),
                         (b, lambda g: _unbroadcast(np.where(first, 0.0, g), bv.shape))])


def maximum(a, b):
    """Elementwise maximum; at ties the gradient goes to the first argument."""
    av, bv = values_of(a), values_of(b)
    out = np.maximum(av, bv)
    if not _tracked(a, b):
        return out
    first = av >= bv
    return _record(out, [(a, lambda g: _unbroadcast(np.where(first, g, 0.0), av.shape)),
                         (b, lambda g: _unbroadcast(np.where(first, 0.0, g), bv.shape))])


# ---------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------

def neg(x):
    xv = values_of(x)
    out = -xv
    if not _tracked(x):
        return out
    return _record(out, [(x, lambda g: -g)])


def exp(x):
    xv = values_of(x)
    out = np.exp(xv)
    if not _tracked(x):
        return out
    return _record(out, [(x, lambda g: g * out)])


def log(x):
    xv = values_of(x)
    out = np.log(xv)
    if not _tracked(x):
        return out
    return _record(out, [(x, lambda g: g / xv)])


def log1p(x):
    xv = values_of(x)
    out = np.log1p(xv)
    if not _tracked(x):
        return out
    return _record(out, [(x, lambda g: g / (1.0 + xv))])


def power(x, p):
    """x ** p for a constant exponent p."""
    p = float(p)
    xv = values_of(x)
    out = xv ** p
    if not _tracked(x):
        return out
    return _record(out, [(x, lambda g: g * p * xv ** (p - 1.0))])


def _sigmoid_values(x: Array) -> Array:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x):
    xv = values_of(x)
    out = _sigmoid_values(xv)
    if not _tracked(x):
        return out
    return _record(out, [(x, lambda g: g * out * (1.0 - out))])


def leaky_relu(x, alpha: float = 0.1):
    xv = values_of(x)
    out = np.where(xv >= 0, xv, alpha * xv)
    if not _tracked(x):
        return out
    slope = np.where(xv >= 0, 1.0, alpha)
    return _record(out, [(x, lambda g: g * slope)])


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes inside the closed interval."""
    xv = values_of(x)
    out = np.clip(xv, lo, hi)
    if not _tracked(x):
        return out
    inside = (xv >= lo) & (xv <= hi)
    return _record(out, [(x, lambda g: np.where(inside, g, 0.0))])


# ---------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _reduce_sum(x: Tensor, axis):
    xv = x.values
    out = xv.sum(axis=axis)
    axes = _norm_axes(axis, xv.ndim)

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axes), xv.shape)

    return _record(out, [(x, vjp)])


def _reduce_mean(x: Tensor, axis):
    xv = x.values
    out = xv.mean(axis=axis)
    axes = _norm_axes(axis, xv.ndim)
    count = 1
    for a in axes:
        count *= xv.shape[a]

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g / count, axes), xv.shape)

    return _record(out, [(x, vjp)])


def _reduce_extremum(x: Tensor, axis, reducer, arg_reducer):
    """Shared min/max reduction; ties route the gradient to the first
    attaining element (C order for full reductions, first along the axis
    otherwise)."""
    xv = x.values
    out = reducer(xv, axis=axis)
    if axis is None:
        idx = np.unravel_index(arg_reducer(xv), xv.shape)

        def vjp(g):
            z = np.zeros_like(xv)
            z[idx] = g
            return z
    else:
        if not isinstance(axis, int):
            raise ValueError("min/max reductions support axis=None or a single axis")
        ai = arg_reducer(xv, axis=axis)

        def vjp(g):
            z = np.zeros_like(xv)
            np.put_along_axis(z, np.expand_dims(ai, axis),
                              np.expand_dims(g, axis), axis)
            return z

    return _record(out, [(x, vjp)])


# ---------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------

def reshape(x, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    xv = values_of(x)
    out = xv.reshape(shape)
    if not _tracked(x):
        return out
    return _record(out, [(x, lambda g: g.reshape(xv.shape))])


def take(x, key):
    """Basic (slice/int/ellipsis) indexing."""
    xv = values_of(x)
    out = xv[key]
    if not _tracked(x):
        return out

    def vjp(g):
        z = np.zeros_like(xv)
        z[key] = g
        return z

    return _record(out, [(x, vjp)])


def concat(parts, axis: int = -1):
    vs = [values_of(p) for p in parts]
    out = np.concatenate(vs, axis=axis)
    if not _tracked(*parts):
        return out
    ax = axis % out.ndim
    pulls = []
    start = 0
    for p, v in zip(parts, vs):
        stop = start + v.shape[ax]
        sl = tuple(slice(None) if d != ax else slice(start, stop)
                   for d in range(out.ndim))

        def vjp(g, sl=sl):
            return g[sl]

        pulls.append((p, vjp))
        start = stop
    return _record(out, pulls)


# ---------------------------------------------------------------------
# linear algebra / spatial ops
# ---------------------------------------------------------------------

def matmul(a, b):
    av, bv = values_of(a), values_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {av.shape} @ {bv.shape}")
    out = av @ bv
    if not _tracked(a, b):
        return out
    return _record(out, [(a, lambda g: g @ bv.T),
                         (b, lambda g: av.T @ g)])


def _conv2d_values(xv: Array, wv: Array, bv: Array | None,
                   stride: int, pad: int) -> Array:
    kh, kw, cin, cout = wv.shape
    xp = np.pad(xv, ((pad, pad), (pad, pad), (0, 0))) if pad else xv
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    out = np.tensordot(win, wv, axes=([3, 4, 2], [0, 1, 2]))
    if bv is not None:
        out = out + bv
    return np.ascontiguousarray(out)


def conv2d(x, w, b=None, stride: int = 1, pad: int | None = None):
    """2-D convolution on channels-last [H, W, Cin] with kernel
    [kh, kw, Cin, Cout], zero padding, stride 1 or 2."""
    xv, wv = values_of(x), values_of(w)
    bv = values_of(b) if b is not None else None
    if xv.ndim != 3 or wv.ndim != 4 or xv.shape[2] != wv.shape[2]:
        raise ValueError(f"conv2d shape mismatch: input {xv.shape}, kernel {wv.shape}")
    kh, kw, cin, cout = wv.shape
    if pad is None:
        pad = (kh - 1) // 2
    out = _conv2d_values(xv, wv, bv, stride, pad)
    if not _tracked(x, w, b):
        return out
    ho, wo = out.shape[:2]

    def vjp_x(g):
        gxp = np.zeros((xv.shape[0] + 2 * pad, xv.shape[1] + 2 * pad, cin))
        for di in range(kh):
            for dj in range(kw):
                gxp[di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += \
                    np.tensordot(g, wv[di, dj], axes=([2], [1]))
        if pad:
            return gxp[pad:pad + xv.shape[0], pad:pad + xv.shape[1], :]
        return gxp

    def vjp_w(g):
        xp = np.pad(xv, ((pad, pad), (pad, pad), (0, 0))) if pad else xv
        gw = np.zeros_like(wv)
        for di in range(kh):
            for dj in range(kw):
                xs = xp[di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
                gw[di, dj] = np.tensordot(xs, g, axes=([0, 1], [0, 1]))
        return gw

    pulls = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        pulls.append((b, lambda g: g.sum(axis=(0, 1))))
    return _record(out, pulls)


def upsample2(x):
    """Nearest-neighbor 2x upsampling of a channels-last [H, W, C] map."""
    xv = values_of(x)
    out = xv.repeat(2, axis=0).repeat(2, axis=1)
    if not _tracked(x):
        return out
    h, w = xv.shape[:2]

    def vjp(g):
        return g.reshape(h, 2, w, 2, *xv.shape[2:]).sum(axis=(1, 3))

    return _record(out, [(x, vjp)])


# ---------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------

def grad_check(f, inputs, step: float = 1e-4) -> float:
    """Compare analytic gradients of scalar `f(*leaves)` against central
    finite differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    The caller is responsible for keeping the evaluation point away from
    min/max/clip kinks.
    """
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    leaves = [leaf(a.copy(), tape) for a in arrays]
    out = f(*leaves)
    backward(out)
    analytic = [np.zeros_like(a) if lf.grad is None else lf.grad
                for lf, a in zip(leaves, arrays)]

    def value_at(k: int, i: int, delta: float) -> float:
        shifted = [a.copy() for a in arrays]
        shifted[k].flat[i] += delta
        t = Tape()
        r = f(*[leaf(a, t) for a in shifted])
        return float(values_of(r))

    worst = 0.0
    for k, a in enumerate(arrays):
        for i in range(a.size):
            numeric = (value_at(k, i, step) - value_at(k, i, -step)) / (2.0 * step)
            ana = analytic[k].flat[i]
            worst = max(worst, abs(ana - numeric) / max(1.0, abs(ana)))
    return worst
