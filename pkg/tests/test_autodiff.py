from __future__ import annotations

import numpy as np
import pytest

from matris import autodiff as ad
from matris.autodiff import Segments, Tape


def fd_grad(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    for k in range(x.size):
        xp, xm = x.copy().reshape(-1), x.copy().reshape(-1)
        xp[k] += h
        xm[k] -= h
        flat[k] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g


def scalar(fn):
    """Wrap a Value -> Value map into ndarray -> float."""
    return lambda a: float(fn(ad.constant(a)).data)


W = np.random.default_rng(7).normal(size=(3, 4))
SEG = Segments(np.array([0, 0, 1, 2, 2, 2]), 4)

UNARY = {
    "exp": lambda x: ad.sum(ad.exp(x) * W[0, 0]),
    "log": lambda x: ad.sum(ad.log(x * x + 1.0)),
    "sin_cos": lambda x: ad.sum(ad.sin(x) * ad.cos(x * 2.0)),
    "power": lambda x: ad.sum(ad.power(x * x + 0.5, 1.7)),
    "div": lambda x: ad.sum(x / (x * x + 2.0)),
    "sigmoid": lambda x: ad.sum(ad.sigmoid(x) * x),
    "silu": lambda x: ad.sum(ad.silu(x) * ad.sin(x)),
    "matmul": lambda x: ad.sum(ad.sin(ad.matmul(x, W.T))),
    "linear": lambda x: ad.sum(ad.silu(ad.linear(x, W.T, np.arange(3.0)))),
    "glu": lambda x: ad.sum(ad.glu(x) * ad.glu(x)),
    "einsum": lambda x: ad.sum(ad.einsum("ij,jk->ik", x, W.T) ** 2),
    "concat_getitem": lambda x: ad.sum(ad.concat([x, x * 2.0], axis=1)[1:, 3:] ** 3),
    "transpose_reshape": lambda x: ad.sum(ad.reshape(ad.transpose(x), (-1,)) * np.arange(x.size)),
    "arccos": lambda x: ad.sum(ad.arccos_clamped(ad.sin(x) * 0.9)),
    "sum_axis": lambda x: ad.sum(ad.sum(x, axis=1) ** 2),
}

SEGMENT = {
    "take_segment_sum": lambda x: ad.sum(ad.sin(ad.segment_sum(ad.take(x, [5, 0, 1, 1, 3, 2]), SEG))),
    "softmax": lambda x: ad.sum(ad.segment_softmax_dimwise(x, SEG) * ad.sin(x)),
    "softmax_weighted": lambda x: ad.sum(
        ad.segment_softmax_dimwise(x, SEG, ad.sigmoid(x[:, :1])) * ad.cos(x)
    ),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_first_order(name):
    f = UNARY[name]
    x = np.random.default_rng(0).normal(size=(3, 4)) * 0.8
    tape = Tape()
    xv = tape.leaf(x)
    g = ad.backward(f(xv), [xv])[xv]
    np.testing.assert_allclose(g, fd_grad(scalar(f), x), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("name", sorted(SEGMENT))
def test_segment_first_order(name):
    f = SEGMENT[name]
    x = np.random.default_rng(1).normal(size=(6, 3))
    tape = Tape()
    xv = tape.leaf(x)
    g = ad.backward(f(xv), [xv])[xv]
    np.testing.assert_allclose(g, fd_grad(scalar(f), x), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("name", sorted(UNARY) + sorted(SEGMENT))
def test_second_order_via_create_graph(name):
    """d/dx of (v . grad f(x)) against finite differences of the gradient."""
    f = {**UNARY, **SEGMENT}[name]
    shape = (6, 3) if name in SEGMENT else (3, 4)
    rng = np.random.default_rng(2)
    x = rng.normal(size=shape) * 0.8
    v = rng.normal(size=shape)

    def gv(a, create):
        tape = Tape()
        xv = tape.leaf(a)
        g = ad.backward(f(xv), [xv], create_graph=create)[xv]
        return tape, xv, g

    tape, xv, g = gv(x, True)
    gvsum = ad.sum(g * v)
    # a linear map has a constant gradient, which is not on the tape
    hv = ad.backward(gvsum, [xv])[xv] if gvsum.tape is not None else np.zeros(shape)
    num = fd_grad(lambda a: float(np.sum(gv(a, False)[2] * v)), x, h=1e-5)
    np.testing.assert_allclose(hv, num, rtol=1e-5, atol=1e-7)


def test_third_order_refused_for_fused_nodes():
    tape = Tape()
    x = tape.leaf(np.array([[0.3, -0.2]]))
    g = ad.backward(ad.sum(ad.silu(x)), [x], create_graph=True)[x]
    with pytest.raises(NotImplementedError):
        h = ad.backward(ad.sum(g * g), [x], create_graph=True)[x]
        ad.backward(ad.sum(h), [x])


def test_unreached_input_gets_zero():
    tape = Tape()
    a, b = tape.leaf(np.ones(3)), tape.leaf(np.ones(2))
    g = ad.backward(ad.sum(a * 2.0), [a, b])
    np.testing.assert_array_equal(g[a], 2.0)
    np.testing.assert_array_equal(g[b], 0.0)


def test_tape_order_is_topological():
    tape = Tape()
    x = tape.leaf(np.ones(2))
    y = ad.sin(x) * ad.exp(x)
    z = ad.sum(y + x)
    for node in tape.nodes:
        for p in node.parents:
            if p.tape is tape:
                assert p.index < node.index
    assert z.index == len(tape) - 1


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(x * 2.0, [x])


def _dense_softmax(x, ids, n, w=None):
    out = np.zeros_like(x)
    w = np.ones((len(x), 1)) if w is None else w
    for s in range(n):
        rows = ids == s
        if not rows.any():
            continue
        e = w[rows] * np.exp(x[rows])
        out[rows] = e / e.sum(axis=0, keepdims=True)
    return out


def test_softmax_matches_dense_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        rows = int(rng.integers(1, 12))
        ids = rng.integers(0, n, rows)
        x = rng.normal(size=(rows, int(rng.integers(1, 5)))) * 3
        w = rng.random((rows, 1))
        seg = Segments(ids, n)
        got = ad.segment_softmax_dimwise(x, seg).data
        np.testing.assert_allclose(got, _dense_softmax(x, ids, n), rtol=0, atol=1e-10)
        got = ad.segment_softmax_dimwise(x, seg, w).data
        np.testing.assert_allclose(got, _dense_softmax(x, ids, n, w), rtol=0, atol=1e-10)


def test_softmax_extreme_logits_stay_finite():
    seg = Segments(np.array([0, 0, 0]), 1)
    x = np.array([[1000.0], [-1000.0], [999.0]])
    a = ad.segment_softmax_dimwise(x, seg).data
    assert np.all(np.isfinite(a))
    assert a.sum() == pytest.approx(1.0)


def test_segment_sum_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1000, 4))
    seg = Segments(rng.integers(0, 7, 1000), 7)
    a = ad.segment_sum(x, seg).data
    b = ad.segment_sum(x.copy(), seg).data
    assert np.array_equal(a, b)
    ref = np.zeros((7, 4))
    np.add.at(ref, seg.ids, x)
    np.testing.assert_allclose(a, ref, rtol=1e-13, atol=1e-13)


def test_check_gradient_helper():
    err = ad.check_gradient(lambda x: ad.sum(ad.exp(x) * x), np.array([0.3, 1.2, -0.7]))
    assert err < 1e-6
