"""Building blocks of the network, written against :mod:`matris.autodiff`.

Parameters are passed as a mapping from name to array or tracked Value; each
block reads the names under its ``prefix``.
"""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..autodiff import Segments, Value
from ..errors import ValidationError


def polynomial_envelope(d, p: int = 5):
    """Smooth cutoff ``u(d)`` on ``d = r / r_cut``; u(1) = u'(1) = u''(1) = 0.

    ``u(d) = 1 - (p+1)(p+2)/2 d^p + p(p+2) d^(p+1) - p(p+1)/2 d^(p+2)``
    """
    c1 = (p + 1) * (p + 2) / 2.0
    c2 = p * (p + 2.0)
    c3 = p * (p + 1) / 2.0
    dp = ad.power(d, p)
    return 1.0 - c1 * dp + c2 * dp * d - c3 * dp * d * d


def bessel_basis(r, r_cut: float, n_bessel: int, p: int = 5) -> Value:
    """Enveloped radial Bessel features, shape (n_edges, n_bessel).

    ``e_n(r) = u(r / r_cut) * sqrt(2 / r_cut) * sin(n pi r / r_cut) / r``
    """
    r = ad.constant(r)
    if r.size and (r.data.min() <= 0.0 or r.data.max() > r_cut + 1e-12):
        raise ValidationError(f"distances must lie in (0, {r_cut}]")
    rc = ad.reshape(r, (-1, 1))
    freq = np.arange(1, n_bessel + 1, dtype=np.float64)[None, :] * (math.pi / r_cut)
    env = polynomial_envelope(rc / r_cut, p)
    return env * math.sqrt(2.0 / r_cut) * ad.sin(rc * freq) / rc


def fourier_basis(theta, m_max: int) -> Value:
    """Angle features, shape (n_angles, m_max + 1).

    Columns 0..m_max/2 hold cos(m theta)/sqrt(pi); the remaining m_max/2
    columns hold sin(k theta)/sqrt(pi), k = 1..m_max/2.
    """
    th = ad.reshape(ad.constant(theta), (-1, 1))
    half = m_max // 2
    inv = 1.0 / math.sqrt(math.pi)
    cos_part = ad.cos(th * np.arange(0, half + 1, dtype=np.float64)[None, :]) * inv
    if half == 0:
        return cos_part
    sin_part = ad.sin(th * np.arange(1, half + 1, dtype=np.float64)[None, :]) * inv
    return ad.concat([cos_part, sin_part], axis=1)


def embed_atoms(numbers, params, prefix: str = "embed.atom") -> Value:
    """``v0_i = W (A[z_i]) + b``."""
    numbers = np.asarray(numbers, dtype=np.int64)
    A = params[f"{prefix}.A"]
    n_rows = ad.constant(A).shape[0]
    bad = numbers[(numbers < 1) | (numbers >= n_rows)]
    if bad.size:
        raise ValidationError(f"element Z={int(bad[0])} is outside the embedding table (max {n_rows - 1})")
    rows = ad.take(A, numbers)
    return rows @ params[f"{prefix}.W"] + params[f"{prefix}.b"]


def linear(x, params, prefix: str) -> Value:
    return ad.linear(x, params[f"{prefix}.W"], params[f"{prefix}.b"])


def mlp(x, params, prefix: str) -> Value:
    """Linear -> SiLU -> Linear."""
    h = ad.silu(ad.linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return ad.linear(h, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


def gmlp(x, params, prefix: str) -> Value:
    """Gated block ``Wo (Wa x + ba) * sigmoid(Wg x + bg) + bo``."""
    x = ad.constant(x)
    Wa = ad.constant(params[f"{prefix}.Wa"])
    if x.shape[-1] != Wa.shape[0]:
        raise ValidationError(f"{prefix}: input width {x.shape[-1]} != {Wa.shape[0]}")
    W = ad.concat([Wa, ad.constant(params[f"{prefix}.Wg"])], axis=1)
    b = ad.concat([ad.constant(params[f"{prefix}.ba"]), ad.constant(params[f"{prefix}.bg"])], axis=0)
    gated = ad.glu(ad.linear(x, W, b))
    return ad.linear(gated, params[f"{prefix}.Wo"], params[f"{prefix}.bo"])


def edge_gmlp(node, edge, tgt: Segments, src: Segments, params, prefix: str) -> Value:
    """``gmlp(node[tgt] || node[src] || edge)`` without materialising the concat.

    The first-layer weights are split by input block, so node blocks are
    multiplied once per node and then gathered.
    """
    node, edge = ad.constant(node), ad.constant(edge)
    dn = node.shape[1]
    Wa, Wg = ad.constant(params[f"{prefix}.Wa"]), ad.constant(params[f"{prefix}.Wg"])
    if Wa.shape[0] != 2 * dn + edge.shape[1]:
        raise ValidationError(f"{prefix}: input width mismatch")
    W = ad.concat([Wa, Wg], axis=1)
    b = ad.concat([ad.constant(params[f"{prefix}.ba"]), ad.constant(params[f"{prefix}.bg"])], axis=0)
    h = (
        ad.take(ad.matmul(node, W[:dn]), tgt)
        + ad.take(ad.matmul(node, W[dn : 2 * dn]), src)
        + ad.linear(edge, W[2 * dn :], b)
    )
    return ad.linear(ad.glu(h), params[f"{prefix}.Wo"], params[f"{prefix}.bo"])


def dimwise_softmax(x, segments: Segments, weights=None) -> Value:
    """Softmax over each segment's rows, independently per feature column."""
    return ad.segment_softmax_dimwise(x, segments, weights)


def _attention_weights(edge, params, prefix, segments, weights):
    logits = linear(edge, params, prefix)
    return dimwise_softmax(logits, segments, weights)


def attention_layer(
    node,
    edge,
    tgt: Segments,
    src: Segments,
    params,
    prefix: str,
    *,
    weights=None,
    separable: bool = True,
):
    """Separable dimension-wise attention on a directed graph.

    Returns ``(node_out, fused_edge)``. ``tgt``/``src`` hold each edge's target
    and source node. ``weights`` (n_edges, 1) are smooth cutoff factors: they
    enter the softmax normalisation and scale each message, so edges fade out
    continuously. With ``weights=None`` the plain formulation is used.
    """
    fused = edge_gmlp(node, edge, tgt, src, params, f"{prefix}.fuse")
    value = fused if weights is None else fused * weights
    ta = _attention_weights(edge, params, f"{prefix}.att_t", tgt, weights)
    tv = ad.segment_sum(ta * value, tgt)
    if separable:
        sa = _attention_weights(edge, params, f"{prefix}.att_s", src, weights)
        sv = ad.segment_sum(sa * value, src)
        agg = ad.concat([tv, sv], axis=1)
    else:
        agg = tv
    return gmlp(agg, params, f"{prefix}.node"), fused


def refinement_layer(node, edge, e0, tgt: Segments, src: Segments, params, prefix: str, *, envelope=None):
    """Returns ``(delta_node, delta_edge)``.

    ``m = gmlp(v_i || v_j || e_ij)``; the node update aggregates ``mu * m``
    over incoming edges where ``mu = e0 @ W_env`` (no bias, so it vanishes
    with ``e0`` at the cutoff). Passing ``envelope`` (n_edges, 1) replaces the
    learnable factor with a fixed one.
    """
    m = edge_gmlp(node, edge, tgt, src, params, f"{prefix}.fuse")
    mu = ad.matmul(e0, params[f"{prefix}.env.W"]) if envelope is None else envelope
    delta_node = mlp(ad.segment_sum(mu * m, tgt), params, f"{prefix}.node")
    delta_edge = mlp(m, params, f"{prefix}.edge")
    return delta_node, delta_edge


def layer_norm(x, params, prefix: str, eps: float = 1e-5) -> Value:
    """Standardise each row over its features, then apply learnable scale/shift."""
    x = ad.constant(x)
    d = x.shape[1]
    mean = ad.sum(x, axis=1, keepdims=True) * (1.0 / d)
    xc = x - mean
    var = ad.sum(xc * xc, axis=1, keepdims=True) * (1.0 / d)
    return xc * ad.power(var + eps, -0.5) * params[f"{prefix}.scale"] + params[f"{prefix}.shift"]


def time_features(t, t_max: float, n_features: int) -> np.ndarray:
    """Sinusoidal encoding of the diffusion step, shape (len(t), n_features)."""
    tau = np.asarray(t, dtype=np.float64).reshape(-1, 1) / float(t_max)
    half = (n_features + 1) // 2
    k = np.arange(1, half + 1, dtype=np.float64)[None, :] * math.pi
    feats = np.concatenate([np.sin(k * tau), np.cos(k * tau)], axis=1)
    return feats[:, :n_features]
