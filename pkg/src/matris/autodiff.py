"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations in execution order. Vector-Jacobian
products are written with tape operations, so ``backward(..., create_graph=True)``
records the backward pass and the result can be differentiated again (needed
to train on forces, which are already derivatives of the energy).

A few hot spots (SiLU, the gated unit, the segment softmax) record their first
derivative as one fused node whose own VJP is computed directly in numpy.
Those support exactly two levels of differentiation; asking for a third raises
``NotImplementedError``. When the tape is not recording, VJPs skip node
creation and work on plain arrays.

Example::

    tape = Tape()
    x = tape.leaf(np.array(3.0))
    y = x * x
    grads = backward(y, [x])      # {x: array(6.)}
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tape",
    "Value",
    "Segments",
    "backward",
    "grad",
    "check_gradient",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sin",
    "cos",
    "absolute",
    "arccos_clamped",
    "sigmoid",
    "silu",
    "glu",
    "matmul",
    "linear",
    "einsum",
    "sum",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum_to",
    "take",
    "segment_sum",
    "segment_max",
    "segment_softmax_dimwise",
    "concat",
    "getitem",
    "pad_slice",
]

ARCCOS_CLAMP = 1e-12


class Tape:
    """Ordered record of operations.

    A tape is confined to one thread: record, then run ``backward``. Nodes are
    appended as they are created so inputs always precede their consumers.
    """

    def __init__(self) -> None:
        self.nodes: list[Value] = []
        self.recording = True
        self.active: np.ndarray | None = None

    def leaf(self, data, name: str | None = None) -> Value:
        """Register ``data`` as a differentiable input."""
        v = Value(np.array(data, dtype=np.float64), tape=self, name=name)
        v.index = len(self.nodes)
        self.nodes.append(v)
        return v

    def __len__(self) -> int:
        return len(self.nodes)


class Value:
    __slots__ = ("data", "tape", "index", "parents", "vjp", "name")
    __array_priority__ = 1000

    def __init__(self, data, tape: Tape | None = None, parents=(), vjp=None, name=None):
        self.data = data
        self.tape = tape
        self.index = -1
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    @property
    def T(self) -> Value:
        return transpose(self)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Value{tag}(shape={self.shape}, tracked={self.tracked})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def constant(x) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=np.float64))


def _needs(v: Value) -> bool:
    """Whether a gradient for ``v`` is wanted in the running backward pass."""
    tape = v.tape
    if tape is None:
        return False
    active = tape.active
    return active is None or v.index >= len(active) or bool(active[v.index])


def _record(data: np.ndarray, parents: tuple, vjp: Callable) -> Value:
    """Create the output node; record it only if some parent is tracked."""
    tape = None
    for p in parents:
        if p.tape is not None and p.tape.recording:
            tape = p.tape
            break
    if tape is None:
        return Value(data)
    out = Value(data, tape=tape, parents=parents, vjp=vjp)
    out.index = len(tape.nodes)
    tape.nodes.append(out)
    return out


# ----------------------------------------------------------------------------
# broadcasting helpers
# ----------------------------------------------------------------------------


def broadcast_to(x, shape) -> Value:
    x = constant(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    in_shape = x.shape
    return _record(np.broadcast_to(x.data, shape), (x,), lambda g: (sum_to(g, in_shape),))


def sum_to(x, shape) -> Value:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    x = constant(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        k + lead for k, n in enumerate(shape) if n == 1 and x.shape[k + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    in_shape = x.shape
    return _record(data, (x,), lambda g: (broadcast_to(g, in_shape),))


def _unb(g: Value, shape) -> Value:
    return sum_to(g, shape) if g.shape != tuple(shape) else g


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------


def add(a, b) -> Value:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unb(g, sa), _unb(g, sb)))


def sub(a, b) -> Value:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unb(g, sa), _unb(neg(g), sb)))


def neg(a) -> Value:
    a = constant(a)
    return _record(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Value:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = _unb(mul(g, b), sa) if _needs(a) else None
        gb = _unb(mul(g, a), sb) if _needs(b) else None
        return ga, gb

    return _record(a.data * b.data, (a, b), vjp)


def div(a, b) -> Value:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = _unb(div(g, b), sa) if _needs(a) else None
        gb = _unb(neg(div(mul(g, a), mul(b, b))), sb) if _needs(b) else None
        return ga, gb

    return _record(a.data / b.data, (a, b), vjp)


def power(a, p: float) -> Value:
    """``a ** p`` for a constant real exponent."""
    a = constant(a)
    p = float(p)
    if p == 1.0:
        return a
    if p == 2.0:
        return mul(a, a)

    def vjp(g):
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return _record(np.power(a.data, p), (a,), vjp)


def exp(a) -> Value:
    a = constant(a)
    box: list[Value] = []

    def vjp(g):
        return (mul(g, box[0]),)

    out = _record(np.exp(a.data), (a,), vjp)
    box.append(out)
    return out


def log(a) -> Value:
    a = constant(a)
    return _record(np.log(a.data), (a,), lambda g: (div(g, a),))


def sin(a) -> Value:
    a = constant(a)
    return _record(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a) -> Value:
    a = constant(a)
    return _record(np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def absolute(a) -> Value:
    a = constant(a)
    sign = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (mul(g, sign),))


def arccos_clamped(a, eps: float = ARCCOS_CLAMP) -> Value:
    """arccos of ``a`` clipped to ``[-1+eps, 1-eps]``.

    The derivative is zero where the clip is active, which keeps gradients
    finite at collinear geometries.
    """
    a = constant(a)
    lo, hi = -1.0 + eps, 1.0 - eps
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    clipped = np.clip(a.data, lo, hi)

    def vjp(g):
        # d/dx arccos(x) = -(1 - x^2)^(-1/2), with x re-expressed on the tape
        x = mul(a, inside) + (1.0 - inside) * clipped
        return (mul(mul(g, inside), neg(power(1.0 - mul(x, x), -0.5))),)

    return _record(np.arccos(clipped), (a,), vjp)


def _fast(v: Value) -> bool:
    """True when a VJP may be computed in plain numpy (no graph being built)."""
    return v.tape is None or not v.tape.recording


def sigmoid(a) -> Value:
    a = constant(a)
    box: list[Value] = []

    def vjp(g):
        s = box[0]
        if _fast(s):
            sd = s.data
            return (Value(g.data * sd * (1.0 - sd)),)
        return (mul(g, mul(s, 1.0 - s)),)

    out = _record(_sigmoid(a.data), (a,), vjp)
    box.append(out)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.negative(x)
    with np.errstate(over="ignore"):
        np.exp(out, out=out)  # inf for very negative x gives exactly 0 below
    out += 1.0
    np.reciprocal(out, out=out)
    return out


def _no_third_order(v: Value) -> None:
    if v.tape is not None and v.tape.recording:
        raise NotImplementedError("derivatives beyond second order are not supported")


def silu(a) -> Value:
    """x * sigmoid(x)."""
    a = constant(a)
    sig = _sigmoid(a.data)

    def vjp(g):
        if _fast(a):
            return (Value(g.data * (sig * (1.0 + a.data * (1.0 - sig)))),)
        return (_silu_grad(a, g, sig),)

    return _record(a.data * sig, (a,), vjp)


def _silu_grad(a: Value, g: Value, sig: np.ndarray) -> Value:
    """``g * silu'(a)`` as a single node; its own VJP is computed directly."""
    x = a.data
    d1 = sig * (1.0 + x * (1.0 - sig))

    def vjp(u):
        _no_third_order(u)
        ga = u.data * g.data * (sig * (1.0 - sig) * (2.0 + x * (1.0 - 2.0 * sig))) if _needs(a) else None
        gg = u.data * d1 if _needs(g) else None
        return (None if ga is None else Value(ga)), (None if gg is None else Value(gg))

    return _record(g.data * d1, (a, g), vjp)


def glu(h) -> Value:
    """Gated unit on the two column halves: ``h[:, :d] * sigmoid(h[:, d:])``."""
    h = constant(h)
    d = h.shape[1] // 2
    if h.ndim != 2 or 2 * d != h.shape[1]:
        raise ValueError(f"glu expects an even number of columns, got {h.shape}")
    lin, gate = h.data[:, :d], h.data[:, d:]
    sig = _sigmoid(gate)

    def vjp(g):
        if _fast(h):
            return (Value(_glu_grad_np(g.data, lin, sig)),)
        return (_glu_grad(h, g, lin, sig),)

    return _record(lin * sig, (h,), vjp)


def _glu_grad_np(gd, lin, sig):
    d = lin.shape[1]
    out = np.empty((gd.shape[0], 2 * d))
    np.multiply(gd, sig, out=out[:, :d])
    np.multiply(out[:, :d], lin * (1.0 - sig), out=out[:, d:])
    return out


def _glu_grad(h: Value, g: Value, lin, sig) -> Value:
    """VJP of :func:`glu` as one node with a directly computed VJP."""
    ds = sig * (1.0 - sig)

    def vjp(u):
        _no_third_order(u)
        d = lin.shape[1]
        ua, ub = u.data[:, :d], u.data[:, d:]
        gd = g.data
        gg = ua * sig + ub * lin * ds if _needs(g) else None
        gh = None
        if _needs(h):
            gh = np.empty(u.shape)
            gh[:, :d] = ub * gd * ds
            gh[:, d:] = gd * ds * (ua + ub * lin * (1.0 - 2.0 * sig))
        return (None if gh is None else Value(gh)), (None if gg is None else Value(gg))

    return _record(_glu_grad_np(g.data, lin, sig), (h, g), vjp)


# ----------------------------------------------------------------------------
# linear algebra and reductions
# ----------------------------------------------------------------------------


def matmul(a, b) -> Value:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = matmul(g, transpose(b)) if _needs(a) else None
        gb = matmul(transpose(a), g) if _needs(b) else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), vjp)


def linear(x, W, b=None) -> Value:
    """``x @ W + b`` as one node (bias broadcast over rows)."""
    x, W = constant(x), constant(W)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {W.shape}")
    data = x.data @ W.data
    parents = (x, W)
    if b is not None:
        b = constant(b)
        data += b.data
        parents = (x, W, b)

    def vjp(g):
        gx = matmul(g, transpose(W)) if _needs(x) else None
        gW = matmul(transpose(x), g) if _needs(W) else None
        if b is None:
            return gx, gW
        gb = sum(g, axis=0) if _needs(b) else None
        return gx, gW, gb

    return _record(data, parents, vjp)


def einsum(subscripts: str, a, b) -> Value:
    """Two-operand einsum. Every index of an operand must appear in the other
    operand or in the output (true for the contractions used here)."""
    a, b = constant(a), constant(b)
    ins, out = subscripts.replace(" ", "").split("->")
    ia, ib = ins.split(",")
    for idx, other in ((ia, ib), (ib, ia)):
        for c in idx:
            if c not in other and c not in out:
                raise ValueError(f"einsum index {c!r} summed within a single operand")

    def vjp(g):
        ga = einsum(f"{out},{ib}->{ia}", g, b) if _needs(a) else None
        gb = einsum(f"{out},{ia}->{ib}", g, a) if _needs(b) else None
        return ga, gb

    return _record(np.einsum(subscripts, a.data, b.data), (a, b), vjp)


def transpose(a) -> Value:
    a = constant(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D value")
    return _record(a.data.T, (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Value:
    a = constant(a)
    in_shape = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (reshape(g, in_shape),))


def sum(a, axis=None, keepdims=False) -> Value:  # noqa: A001 - mirrors numpy
    a = constant(a)
    in_shape = a.shape
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kshape = (1,) * a.ndim
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        kshape = tuple(1 if k in axes else n for k, n in enumerate(in_shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kshape), in_shape),)

    return _record(np.asarray(data), (a,), vjp)


def concat(values: Sequence, axis: int = -1) -> Value:
    vals = [constant(v) for v in values]
    ax = axis % vals[0].ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def vjp(g):
        out = []
        for k, v in enumerate(vals):
            if not _needs(v):
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(bounds[k]), int(bounds[k + 1]))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _record(np.concatenate([v.data for v in vals], axis=ax), tuple(vals), vjp)


def _is_basic_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in keys)


def getitem(a, key) -> Value:
    """Basic slicing, or row gathering when ``key`` is an integer array."""
    a = constant(a)
    if not _is_basic_index(key):
        if isinstance(key, tuple):
            raise ValueError("advanced indexing only supported as a row index array")
        return take(a, key)
    in_shape = a.shape
    return _record(a.data[key], (a,), lambda g: (pad_slice(g, key, in_shape),))


def pad_slice(g, key, shape) -> Value:
    """Place ``g`` at ``zeros(shape)[key]`` (adjoint of basic slicing)."""
    g = constant(g)
    data = np.zeros(shape)
    data[key] = g.data
    return _record(data, (g,), lambda h: (getitem(h, key),))


# ----------------------------------------------------------------------------
# gather / scatter over segments
# ----------------------------------------------------------------------------


class Segments:
    """Static assignment of rows to ``n`` segments.

    Reductions use a CSR matrix whose rows are visited in index order, so sums
    are reproducible bit for bit.
    """

    def __init__(self, ids, n: int):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise ValueError("segment id out of range")
        self.ids = ids
        self.n = int(n)
        rows = ids.size
        self.counts = np.bincount(ids, minlength=self.n)
        # CSR built directly; the stable sort keeps columns ascending in each row
        order = np.argsort(ids, kind="stable")
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(self.counts, out=indptr[1:])
        self.matrix = sp.csr_matrix((np.ones(rows), order, indptr), shape=(self.n, rows))
        self._sorted = order
        self._order = None

    def __len__(self) -> int:
        return self.ids.size

    def reduce(self, x: np.ndarray) -> np.ndarray:
        flat = x.reshape(x.shape[0], -1)
        out = np.asarray(self.matrix @ flat)
        return out.reshape((self.n,) + x.shape[1:])

    def max(self, x: np.ndarray) -> np.ndarray:
        """Per-segment maximum (empty segments give 0)."""
        out = np.zeros((self.n,) + x.shape[1:])
        if self.ids.size == 0:
            return out
        if self._order is None:
            order = self._sorted
            sorted_ids = self.ids[order]
            starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
            self._order = (order, starts, sorted_ids[starts])
        order, starts, seg = self._order
        out[seg] = np.maximum.reduceat(x[order], starts, axis=0)
        return out


def _as_index(index) -> np.ndarray:
    if isinstance(index, Segments):
        return index.ids
    return np.asarray(index, dtype=np.int64)


def take(a, index, n_rows: int | None = None) -> Value:
    """Gather rows: ``out[k] = a[index[k]]``."""
    a = constant(a)
    seg = index if isinstance(index, Segments) else None
    idx = _as_index(index)
    n = a.shape[0]

    def vjp(g):
        s = seg if seg is not None and seg.n == n else Segments(idx, n)
        return (segment_sum(g, s),)

    return _record(np.take(a.data, idx, axis=0), (a,), vjp)


def segment_sum(x, segments: Segments) -> Value:
    """``out[s] = sum of x[k] over rows k with segments.ids[k] == s``."""
    x = constant(x)
    if x.shape[0] != len(segments):
        raise ValueError(f"segment_sum: {x.shape[0]} rows but {len(segments)} ids")
    return _record(segments.reduce(x.data), (x,), lambda g: (take(g, segments),))


def segment_max(x, segments: Segments) -> np.ndarray:
    """Per-segment max as a plain array (used as a stop-gradient shift)."""
    return segments.max(constant(x).data)


def _softmax_shift(x: np.ndarray, segments: Segments) -> np.ndarray:
    """Per-segment, per-column stabilising shift, gathered back to rows.

    The segment mean is used (one sparse product instead of a segmented max);
    it keeps every denominator >= 1 for unweighted rows and cannot overflow
    unless a segment spans more than ~700 in one column, in which case the
    exact maximum is used instead.
    """
    counts = np.maximum(segments.counts, 1).reshape((-1,) + (1,) * (x.ndim - 1))
    shift = (segments.reduce(x) / counts)[segments.ids]
    if x.size and (x - shift).max() > 700.0:
        shift = segments.max(x)[segments.ids]
    return shift


def _sum_to_np(x: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(k + lead for k, n in enumerate(shape) if n == 1 and x.shape[k + lead] != 1)
    return x.sum(axis=axes, keepdims=True).reshape(shape)


def _softmax_grad(x, weights, g, alpha, rho, segments: Segments, wrt_weights: bool) -> Value:
    """One half of the softmax VJP as a node: ``alpha * q`` (w.r.t. the
    logits) or ``sum_to(rho * q)`` (w.r.t. the weights), with
    ``q = g - S(alpha * g)``; ``S`` sums over each segment and broadcasts
    back to its rows and ``rho = alpha / w``. Its VJP is computed directly.
    """

    def seg(a):
        return segments.reduce(a)[segments.ids]

    gd = g.data
    q = gd - seg(alpha * gd)
    data = _sum_to_np(rho * q, weights.shape) if wrt_weights else alpha * q
    parents = (x, g) if weights is None else (x, g, weights)

    def vjp(u):
        _no_third_order(u)
        if wrt_weights:
            v = np.broadcast_to(u.data, alpha.shape)
            c = v * rho
            a_bar = -gd * seg(c)
            r_bar = v * q
        else:
            c = u.data * alpha
            a_bar = u.data * q - gd * seg(c)
            r_bar = None
        g_bar = c - alpha * seg(c)
        t = a_bar - seg(a_bar * alpha)
        x_bar = alpha * t
        w_bar = rho * t if rho is not None else None
        if r_bar is not None:
            sr = seg(r_bar * rho)
            x_bar = x_bar + r_bar * rho - alpha * sr
            w_bar = w_bar - rho * sr
        out = [Value(x_bar) if _needs(x) else None, Value(g_bar) if _needs(g) else None]
        if weights is not None:
            out.append(Value(_sum_to_np(w_bar, weights.shape)) if _needs(weights) else None)
        return tuple(out)

    return _record(data, parents, vjp)


def segment_softmax_dimwise(x, segments: Segments, weights=None) -> Value:
    """Softmax over the rows of each segment, independently per column.

    ``alpha[k, d] = w[k] exp(x[k, d]) / sum_{l in seg(k)} w[l] exp(x[l, d])``

    ``weights`` (optional, nonnegative, broadcastable to ``x``) smoothly remove
    rows from the normalisation; with ``weights=None`` this is the plain
    dimension-wise softmax.
    """
    x = constant(x)
    shift = _softmax_shift(x.data, segments)
    e = np.exp(x.data - shift)
    if weights is not None:
        weights = constant(weights)
        num = e * weights.data
    else:
        num = e
    den = segments.reduce(num)
    if np.isnan(den).any():
        raise ValueError("NaN in softmax input")
    den_rows = np.where(den > 0.0, den, 1.0)[segments.ids]
    alpha = num / den_rows
    rho = e / den_rows if weights is not None else None
    box: list[Value] = []

    def vjp(g):
        out = box[0]
        if _fast(out):
            gd = g.data
            q = gd - segments.reduce(alpha * gd)[segments.ids]
            gx = Value(alpha * q) if _needs(x) else None
            gw = None
            if weights is not None and _needs(weights):
                gw = Value(_sum_to_np(rho * q, weights.shape))
            return (gx, gw) if weights is not None else (gx,)
        gx = _softmax_grad(x, weights, g, alpha, rho, segments, False) if _needs(x) else None
        gw = None
        if weights is not None and _needs(weights):
            gw = _softmax_grad(x, weights, g, alpha, rho, segments, True)
        return (gx, gw) if weights is not None else (gx,)

    parents = (x,) if weights is None else (x, weights)
    out = _record(alpha, parents, vjp)
    box.append(out)
    return out


# ----------------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------------


def backward(output: Value, inputs: Sequence[Value] | None = None, *, create_graph=False):
    """Accumulate d(output)/d(input) for every tracked node reachable from ``output``.

    Returns a dict mapping each requested input (all leaves if ``inputs`` is
    None) to its gradient: an ndarray, or a tracked :class:`Value` when
    ``create_graph`` is set. Inputs with no path to the output get zeros.
    """
    if not isinstance(output, Value) or output.tape is None:
        raise ValueError("output is not recorded on a tape")
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    tape = output.tape
    keep = {v.index for v in inputs if v.tape is tape} if inputs is not None else set()
    grads: dict[int, Value] = {output.index: Value(np.ones_like(output.data))}
    prev = tape.recording, tape.active
    active = None
    if inputs is not None:
        active = np.zeros(output.index + 1, dtype=bool)
        for v in inputs:
            if v.tape is tape and v.index <= output.index:
                active[v.index] = True
        lo = int(np.flatnonzero(active)[0]) if active.any() else output.index + 1
        nodes = tape.nodes
        for k in range(lo, output.index + 1):
            for p in nodes[k].parents:
                if p.tape is tape and 0 <= p.index < k and active[p.index]:
                    active[k] = True
                    break
    tape.recording = bool(create_graph)
    tape.active = active
    try:
        for k in range(output.index, -1, -1):
            if active is not None and not active[k]:
                continue
            g = grads.get(k)
            if g is None:
                continue
            node = tape.nodes[k]
            if node.vjp is None:
                continue
            if not create_graph and k not in keep:
                del grads[k]
            pgrads = node.vjp(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or parent.tape is not tape or parent.index < 0:
                    continue
                if active is not None and not active[parent.index]:
                    continue
                if pg.shape != parent.shape:
                    pg = sum_to(pg, parent.shape) if pg.ndim >= parent.ndim else broadcast_to(pg, parent.shape)
                acc = grads.get(parent.index)
                grads[parent.index] = pg if acc is None else add(acc, pg)
    finally:
        tape.recording, tape.active = prev
    if inputs is None:
        inputs = [v for v in tape.nodes if v.vjp is None]
    result = {}
    for v in inputs:
        g = grads.get(v.index) if v.tape is tape else None
        if g is None:
            result[v] = Value(np.zeros_like(v.data)) if create_graph else np.zeros_like(v.data)
        else:
            result[v] = g if create_graph else np.array(g.data)
    return result


def grad(output: Value, inputs: Sequence[Value], *, create_graph=False) -> list:
    """List form of :func:`backward`, ordered like ``inputs``."""
    g = backward(output, inputs, create_graph=create_graph)
    return [g[v] for v in inputs]


def check_gradient(f: Callable[[Value], Value], x, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a tracked Value to a scalar Value. The error per coordinate is
    ``|analytic - numeric| / (|analytic| + 1e-10)``.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xv = tape.leaf(x)
    analytic = backward(f(xv), [xv])[xv]
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for k in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[k] += h
        xm[k] -= h
        fp = float(f(constant(xp.reshape(x.shape))).data)
        fm = float(f(constant(xm.reshape(x.shape))).data)
        numeric.reshape(-1)[k] = (fp - fm) / (2.0 * h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-10)))
