from __future__ import annotations

import itertools

import numpy as np
import pytest

from matris.errors import OverlappingAtomsError, ValidationError
from matris.graphgen import NeighborList, build_atom_graph, build_line_graph
from matris.structio import Structure

from .conftest import random_structure


def brute_edges(s: Structure, r_cut: float, reach: int = 4):
    """Every (i, j, shift) within r_cut, enumerating a generous image box."""
    n = len(s)
    rng_ = range(-reach, reach + 1)
    shifts = [np.array(t) for t in itertools.product(*[rng_ if p else [0] for p in s.pbc])] if s.periodic else [np.zeros(3, int)]
    out = set()
    for i in range(n):
        for j in range(n):
            for sh in shifts:
                if i == j and not sh.any():
                    continue
                v = s.positions[i] - s.positions[j] - sh @ s.lattice
                if np.linalg.norm(v) <= r_cut:
                    out.add((i, j, tuple(int(c) for c in sh)))
    return out


def brute_angles(g, r_cut_l):
    nodes = [k for k in range(g.n_edges) if g.distances[k] <= r_cut_l]
    out = set()
    for a, b in itertools.combinations(nodes, 2):
        if g.sources[a] == g.sources[b]:
            out.add((min(a, b), max(a, b)))
    return out


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(11)
    for trial in range(100):
        s = random_structure(rng, n=int(rng.integers(1, 11)), periodic=trial % 2 == 0, min_dist=0.5)
        r_cut = float(rng.uniform(1.5, 4.0))
        g = build_atom_graph(s, r_cut)
        assert set(g.edges) == brute_edges(s, r_cut)
        vec = s.positions[g.targets] - s.positions[g.sources] - g.shifts @ s.lattice
        np.testing.assert_allclose(g.vectors, vec, atol=1e-10)
        np.testing.assert_allclose(g.distances, np.linalg.norm(vec, axis=1), atol=1e-10)
        lg = build_line_graph(g, r_cut * 0.8)
        got = {tuple(sorted(int(lg.nodes[x]) for x in p)) for p in lg.pairs}
        assert got == brute_angles(g, r_cut * 0.8)
        assert len(got) == lg.n_angles
        for p, c, cos in zip(lg.pairs, lg.centers, lg.cosines):
            a, b = lg.nodes[p]
            assert g.sources[a] == g.sources[b] == c
            ua, ub = g.vectors[a] / g.distances[a], g.vectors[b] / g.distances[b]
            assert abs(cos - ua @ ub) < 1e-10


def test_cells_and_brute_agree():
    rng = np.random.default_rng(3)
    for _ in range(5):
        s = random_structure(rng, n=9, periodic=True, min_dist=0.5)
        a = build_atom_graph(s, 3.5, method="cells")
        b = build_atom_graph(s, 3.5, method="brute")
        assert a.edges == b.edges


def test_small_cell_counts_self_images():
    s = Structure([1], [[0.0, 0.0, 0.0]], np.eye(3) * 2.0, (True, True, True))
    g = build_atom_graph(s, 2.0)
    assert g.n_edges == 6
    assert np.allclose(g.distances, 2.0)


def test_edge_symmetry_and_wrapped_input():
    rng = np.random.default_rng(8)
    s = random_structure(rng, n=6, periodic=True)
    g = build_atom_graph(s, 3.0)
    moved = s.copy(positions=s.positions + np.array([2, -1, 3]) @ s.lattice)
    g2 = build_atom_graph(moved, 3.0)
    np.testing.assert_allclose(np.sort(g.distances), np.sort(g2.distances), atol=1e-10)
    rev = {(j, i, tuple(-c for c in sh)) for i, j, sh in g.edges}
    assert rev == set(g.edges)


def test_overlap_and_cutoff_errors():
    s = Structure([1, 1], [[0, 0, 0], [1e-7, 0, 0]])
    with pytest.raises(OverlappingAtomsError):
        build_atom_graph(s, 2.0)
    with pytest.raises(ValidationError):
        build_atom_graph(Structure([1], [[0, 0, 0]]), 0.0)
    g = build_atom_graph(Structure([1, 1], [[0, 0, 0], [1, 0, 0]]), 2.0)
    with pytest.raises(ValidationError):
        build_line_graph(g, 3.0)


def test_empty_and_isolated():
    g = build_atom_graph(Structure([1], [[0, 0, 0]]), 3.0)
    assert g.n_edges == 0
    assert build_line_graph(g, 2.0).n_angles == 0


def _same_graph(a, b):
    for f in ("targets", "sources", "shifts", "vectors", "distances"):
        assert np.array_equal(getattr(a, f), getattr(b, f)), f


def test_neighbor_list_matches_fresh_build(rng):
    s = random_structure(rng, 12, periodic=True)
    nl = NeighborList(3.0, skin=0.6)
    x = s.positions.copy()
    for _ in range(40):
        x = x + rng.normal(scale=0.04, size=x.shape)
        t = Structure(s.numbers, x, s.lattice, s.pbc)
        _same_graph(nl.graph(t), build_atom_graph(t, 3.0))
    # displacements far below skin/2 over most steps: the list is reused
    assert 1 <= nl.rebuilds < 40
    # a new cell forces a rebuild
    n = nl.rebuilds
    t2 = Structure(s.numbers, x, s.lattice * 1.01, s.pbc)
    _same_graph(nl.graph(t2), build_atom_graph(t2, 3.0))
    assert nl.rebuilds == n + 1
    with pytest.raises(ValidationError):
        NeighborList(3.0, skin=-1)
