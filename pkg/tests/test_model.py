from __future__ import annotations

import numpy as np
import pytest

from matris import autodiff as ad
from matris.autodiff import Segments
from matris.errors import ValidationError
from matris.model import (
    GraphBatch,
    ModelConfig,
    init_params,
    load_checkpoint,
    parameter_shapes,
    predict,
    save_checkpoint,
    forward,
)
from matris.model import layers as L
from matris.model.audit import audit_structure
from matris.structio import Structure

from .conftest import SMALL, random_structure


def _rot(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


# --- layers -----------------------------------------------------------------


def test_envelope_vanishes_smoothly():
    d = np.array([1.0])
    tape = ad.Tape()
    x = tape.leaf(d)
    u = L.polynomial_envelope(x, 5)
    g1 = ad.backward(ad.sum(u), [x], create_graph=True)[x]
    g2 = ad.backward(ad.sum(g1), [x])[x]
    assert abs(u.data[0]) < 1e-12 and abs(g1.data[0]) < 1e-10 and abs(g2[0]) < 1e-8
    assert float(L.polynomial_envelope(ad.constant(np.array([0.0])), 5).data[0]) == 1.0


def test_bessel_basis_zero_at_cutoff_and_range_check():
    e = L.bessel_basis(np.array([5.0, 2.0]), 5.0, 7).data
    assert np.all(np.abs(e[0]) < 1e-12) and np.any(np.abs(e[1]) > 1e-3)
    with pytest.raises(ValidationError):
        L.bessel_basis(np.array([5.1]), 5.0, 7)


def test_fourier_basis_columns():
    th = np.array([0.3, 2.0])
    f = L.fourier_basis(th, 4).data
    ref = np.stack([np.cos(0 * th), np.cos(th), np.cos(2 * th), np.sin(th), np.sin(2 * th)], 1) / np.sqrt(np.pi)
    np.testing.assert_allclose(f, ref, atol=1e-14)


def _rand_params(rng, prefix, d_node, d_edge, separable, dimwise=True):
    da = d_edge if dimwise else 1
    P = {}
    for name, (i, o) in {"fuse": (2 * d_node + d_edge, d_edge), "node": ((2 if separable else 1) * d_edge, d_node)}.items():
        for k, shape in (("Wa", (i, o)), ("Wg", (i, o)), ("Wo", (o, o)), ("ba", (o,)), ("bg", (o,)), ("bo", (o,))):
            P[f"{prefix}.{name}.{k}"] = rng.normal(size=shape) * 0.5
    for br in ("att_t", "att_s"):
        P[f"{prefix}.{br}.W"] = rng.normal(size=(d_edge, da))
        P[f"{prefix}.{br}.b"] = rng.normal(size=(da,))
    return P


def _gmlp_dense(x, P, p):
    sig = 1.0 / (1.0 + np.exp(-(x @ P[f"{p}.Wg"] + P[f"{p}.bg"])))
    return ((x @ P[f"{p}.Wa"] + P[f"{p}.ba"]) * sig) @ P[f"{p}.Wo"] + P[f"{p}.bo"]


def _attention_dense(node, edge, tgt, src, P, p, w, separable):
    """Per-node loops over explicit neighbour lists."""
    n = len(node)
    fused = np.array([_gmlp_dense(np.concatenate([node[tgt[k]], node[src[k]], edge[k]])[None], P, f"{p}.fuse")[0]
                      for k in range(len(edge))])
    value = fused * w
    branches = [("att_t", tgt)] + ([("att_s", src)] if separable else [])
    agg = []
    for br, ids in branches:
        logit = edge @ P[f"{p}.{br}.W"] + P[f"{p}.{br}.b"]
        out = np.zeros((n, fused.shape[1]))
        for i in range(n):
            rows = np.flatnonzero(ids == i)
            if rows.size == 0:
                continue
            e = w[rows] * np.exp(logit[rows])
            a = e / e.sum(axis=0)
            out[i] = (a * value[rows]).sum(axis=0)
        agg.append(out)
    return _gmlp_dense(np.concatenate(agg, axis=1), P, f"{p}.node"), fused


@pytest.mark.parametrize("separable,dimwise", [(True, True), (False, True), (True, False)])
def test_attention_layer_matches_dense_oracle(separable, dimwise):
    rng = np.random.default_rng(21)
    for _ in range(100):
        n = int(rng.integers(1, 11))
        m = int(rng.integers(1, 25))
        tgt, src = rng.integers(0, n, m), rng.integers(0, n, m)
        node, edge = rng.normal(size=(n, 4)), rng.normal(size=(m, 3))
        w = rng.random((m, 1))
        P = _rand_params(rng, "att", 4, 3, separable, dimwise)
        got_n, got_e = L.attention_layer(node, edge, Segments(tgt, n), Segments(src, n), P, "att",
                                         weights=w, separable=separable)
        ref_n, ref_e = _attention_dense(node, edge, tgt, src, P, "att", w, separable)
        np.testing.assert_allclose(got_n.data, ref_n, rtol=0, atol=1e-10)
        np.testing.assert_allclose(got_e.data, ref_e, rtol=0, atol=1e-10)


# --- network ----------------------------------------------------------------


def test_symmetry_small(rng):
    params = init_params(SMALL, 3)
    for _ in range(6):
        s = random_structure(rng)
        out = forward(s, params)
        R, t = _rot(rng), rng.normal(size=3)
        perm = rng.permutation(len(s))
        moved = Structure(s.numbers[perm], (s.positions @ R.T + t)[perm], s.lattice @ R.T, s.pbc)
        o2 = forward(moved, params)
        assert abs(out.energy - o2.energy) < 1e-9
        np.testing.assert_allclose(o2.forces, (out.forces @ R.T)[perm], atol=1e-8)
        np.testing.assert_allclose(out.forces.sum(axis=0), 0.0, atol=1e-8)


def test_forces_and_stress_match_finite_differences(rng):
    params = init_params(SMALL, 5)
    for periodic in (True, False):
        s = random_structure(rng, n=5, periodic=periodic)
        rep = audit_structure(s, params)
        assert rep.force_error < 1e-5
        if periodic:
            assert rep.stress_error < 1e-5
        else:
            assert rep.stress_error is None
            assert np.all(forward(s, params).stress == 0.0)


def test_batch_equals_individual(rng):
    params = init_params(SMALL, 2)
    structs = [random_structure(rng) for _ in range(4)]
    batch = GraphBatch(structs, SMALL)
    pred = predict(batch, params, SMALL)
    for b, s in enumerate(structs):
        o = forward(s, params)
        assert pred.energy.data[b] == pytest.approx(o.energy, abs=1e-12)
        np.testing.assert_allclose(pred.forces.data[batch.atom_struct == b], o.forces, atol=1e-12)
        np.testing.assert_allclose(pred.stress.data[b], o.stress, atol=1e-12)


def test_reference_energy_added(rng):
    params = init_params(SMALL, 0)
    s = random_structure(rng, periodic=False)
    e0 = forward(s, params).energy
    params["ref_energies"] = np.arange(SMALL.max_z + 1, dtype=float)
    o = forward(s, params)
    assert o.energy == pytest.approx(e0 + s.numbers.sum())
    assert o.ref_energy == pytest.approx(s.numbers.sum())


def test_isolated_atom_has_zero_force():
    params = init_params(SMALL, 0)
    o = forward(Structure([6], [[0.0, 0.0, 0.0]]), params)
    assert np.all(o.forces == 0) and np.isfinite(o.energy)


def test_unknown_element_rejected():
    params = init_params(SMALL, 0)
    with pytest.raises(ValidationError):
        forward(Structure([26, 1], [[0, 0, 0], [1, 0, 0]]), params)


@pytest.mark.parametrize("learnable", [True, False])
def test_energy_smooth_across_cutoff(learnable):
    cfg = SMALL.replace(learnable_envelope=learnable)
    params = init_params(cfg, 4)
    rc = cfg.r_cut_a
    xs = np.arange(rc - 0.02, rc + 0.02, 1e-3)
    fx = []
    for x in xs:
        s = Structure([1, 8, 6], [[0, 0, 0], [x, 0, 0], [0, 1.1, 0]])
        fx.append(forward(s, params).forces[1, 0])
    jumps = np.abs(np.diff(fx))
    assert jumps.max() < 1e-6


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = init_params(SMALL, 9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, {"note": 1})
    back, meta = load_checkpoint(path)
    assert meta == {"note": 1}
    assert back.config == SMALL
    for k in params:
        assert np.array_equal(params[k], back[k])
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValidationError):
        load_checkpoint(path)


def test_denoise_head_dropped_on_load(tmp_path):
    cfg = SMALL.replace(denoise=True)
    params = init_params(cfg, 1)
    save_checkpoint(tmp_path / "d.ckpt", params)
    sup, _ = load_checkpoint(tmp_path / "d.ckpt", config=SMALL, drop_prefix="denoise.")
    assert set(sup) == set(parameter_shapes(SMALL))
    for k in sup:
        assert np.array_equal(sup[k], params[k])
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "d.ckpt", config=SMALL.replace(d_atom=4))


def test_ablation_switches_change_shapes():
    full = parameter_shapes(SMALL)
    assert full["layer0.atom.att_t.W"] == (8, 8)
    assert parameter_shapes(SMALL.replace(dimwise_softmax=False))["layer0.atom.att_t.W"] == (8, 1)
    assert "layer0.atom.att_s.W" not in parameter_shapes(SMALL.replace(separable_attention=False))
    assert "layer0.refine.env.W" not in parameter_shapes(SMALL.replace(learnable_envelope=False))


def test_magmom_head(rng):
    cfg = SMALL.replace(with_magmom=True)
    o = forward(random_structure(rng), init_params(cfg, 0))
    assert o.magmoms is not None and o.magmoms.shape == (len(o.forces),)


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(r_cut_l=7.0)
    with pytest.raises(ValidationError):
        ModelConfig(m_max=3)
    with pytest.raises(ValidationError):
        ModelConfig.from_dict({"width": 3})
