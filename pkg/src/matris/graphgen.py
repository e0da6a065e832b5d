"""Periodic radius graphs over atoms and the derived line graph over bonds.

Edge convention: a directed edge ``(i, j, s)`` has target ``i`` and source
``j`` located at the periodic image ``X_j + s @ L``. Its displacement
``vec = X_i - X_j - s @ L`` points from the source to the target. Angles are
formed by pairs of edges sharing a source atom, which is the angle's centre.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import OverlappingAtomsError, ValidationError
from .structio import Structure

__all__ = ["AtomGraph", "LineGraph", "NeighborList", "build_atom_graph", "build_line_graph", "dump_graphs"]

OVERLAP_TOL = 1e-6
BRUTE_FORCE_BELOW = 64
_MAX_BINS = 4_000_000


@dataclass(frozen=True)
class AtomGraph:
    n_atoms: int
    targets: np.ndarray  # i
    sources: np.ndarray  # j
    shifts: np.ndarray  # integer image offsets of the source, (n_edges, 3)
    vectors: np.ndarray  # X_i - X_j - s @ L
    distances: np.ndarray
    r_cut: float

    @property
    def n_edges(self) -> int:
        return len(self.targets)

    @property
    def units(self) -> np.ndarray:
        if self.n_edges == 0:
            return np.zeros((0, 3))
        return self.vectors / self.distances[:, None]

    @property
    def edges(self) -> list[tuple[int, int, tuple[int, int, int]]]:
        return [
            (int(i), int(j), tuple(int(c) for c in s))
            for i, j, s in zip(self.targets, self.sources, self.shifts)
        ]


@dataclass(frozen=True)
class LineGraph:
    nodes: np.ndarray  # atom-graph edge indices with r <= r_cut
    pairs: np.ndarray  # (n_angles, 2), positions into ``nodes``
    centers: np.ndarray  # shared source atom of each pair
    cosines: np.ndarray
    r_cut: float

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_angles(self) -> int:
        return len(self.pairs)

    @property
    def angle_edges(self) -> np.ndarray:
        """Pairs expressed as atom-graph edge indices."""
        return self.nodes[self.pairs] if self.n_angles else np.zeros((0, 2), dtype=np.int64)

    @property
    def angle_pairs(self) -> list[tuple[int, int, int]]:
        ae = self.angle_edges
        return [(int(a), int(b), int(c)) for (a, b), c in zip(ae, self.centers)]


def _image_bounds(lattice: np.ndarray, pbc, r_cut: float) -> np.ndarray:
    """Largest |shift| per axis that can host a neighbour of a wrapped atom."""
    bounds = np.zeros(3, dtype=np.int64)
    if not any(pbc):
        return bounds
    inv = np.linalg.inv(lattice)
    for a in range(3):
        if pbc[a]:
            spacing = 1.0 / np.linalg.norm(inv[:, a])
            bounds[a] = int(np.floor(r_cut / spacing)) + 1
    return bounds


def _wrap(s: Structure) -> tuple[np.ndarray, np.ndarray]:
    """Positions wrapped into the cell along periodic axes, and the integer
    offsets removed (``X = X0 + offsets @ L``)."""
    offsets = np.zeros((len(s), 3), dtype=np.int64)
    if not s.periodic:
        return s.positions.copy(), offsets
    frac = s.positions @ np.linalg.inv(s.lattice)
    for a in range(3):
        if s.pbc[a]:
            offsets[:, a] = np.floor(frac[:, a]).astype(np.int64)
    return s.positions - offsets @ s.lattice, offsets


def _shift_list(bounds: np.ndarray) -> np.ndarray:
    ranges = [range(-int(b), int(b) + 1) for b in bounds]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64).reshape(-1, 3)


def _pairs_brute(X0, lattice, shifts, r_cut):
    n = len(X0)
    offs = shifts @ lattice  # (S, 3)
    # vec[s, i, j] = X0_i - X0_j - off_s
    diff = X0[:, None, :] - X0[None, :, :]
    vec = diff[None, :, :, :] - offs[:, None, None, :]
    d2 = np.einsum("sijk,sijk->sij", vec, vec)
    s_idx, i_idx, j_idx = np.nonzero(d2 <= r_cut * r_cut)
    return i_idx, j_idx, s_idx, vec[s_idx, i_idx, j_idx]


def _pairs_cells(X0, lattice, shifts, r_cut):
    n = len(X0)
    offs = shifts @ lattice
    img = X0[None, :, :] + offs[:, None, :]  # source candidates at X0_j + off_s
    img = img.reshape(-1, 3)
    img_atom = np.tile(np.arange(n), len(shifts))
    img_shift = np.repeat(np.arange(len(shifts)), n)
    lo = X0.min(axis=0) - r_cut
    hi = X0.max(axis=0) + r_cut
    keep = np.all((img >= lo) & (img <= hi), axis=1)
    img, img_atom, img_shift = img[keep], img_atom[keep], img_shift[keep]
    dims = np.maximum(np.floor((hi - lo) / r_cut).astype(np.int64) + 1, 1)
    if np.prod(dims) > _MAX_BINS:
        return None
    def key_of(cells):
        return (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]

    img_cells = np.minimum(np.floor((img - lo) / r_cut).astype(np.int64), dims - 1)
    img_keys = key_of(img_cells)
    order = np.argsort(img_keys, kind="stable")
    sorted_keys = img_keys[order]
    home_cells = np.minimum(np.floor((X0 - lo) / r_cut).astype(np.int64), dims - 1)
    cand_i, cand_k = [], []
    for off in itertools.product((-1, 0, 1), repeat=3):
        nb = home_cells + np.array(off)
        ok = np.all((nb >= 0) & (nb < dims), axis=1)
        ii = np.flatnonzero(ok)
        keys = key_of(nb[ok])
        start = np.searchsorted(sorted_keys, keys, side="left")
        stop = np.searchsorted(sorted_keys, keys, side="right")
        counts = stop - start
        if counts.sum() == 0:
            continue
        rep_i = np.repeat(ii, counts)
        base = np.repeat(start - np.cumsum(counts) + counts, counts)
        pos = base + np.arange(counts.sum())
        cand_i.append(rep_i)
        cand_k.append(order[pos])
    if not cand_i:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty, np.zeros((0, 3))
    ci = np.concatenate(cand_i)
    ck = np.concatenate(cand_k)
    vec = X0[ci] - img[ck]
    d2 = np.einsum("ij,ij->i", vec, vec)
    m = d2 <= r_cut * r_cut
    return ci[m], img_atom[ck[m]], img_shift[ck[m]], vec[m]


def build_atom_graph(s: Structure, r_cut: float, *, method: str = "auto") -> AtomGraph:
    """All directed pairs (with periodic images) at distance in (0, r_cut].

    ``method`` is ``"auto"``, ``"cells"`` or ``"brute"``; ``auto`` uses brute
    force below 64 atoms and cell lists otherwise.
    """
    if r_cut <= 0:
        raise ValidationError("r_cut must be positive")
    n = len(s)
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return AtomGraph(0, empty, empty, np.zeros((0, 3), np.int64), np.zeros((0, 3)), np.zeros(0), r_cut)
    X0, wrap_off = _wrap(s)
    bounds = _image_bounds(s.lattice, s.pbc, r_cut)
    shifts = _shift_list(bounds)
    lattice = s.lattice if s.periodic else np.zeros((3, 3))
    result = None
    if method == "cells" or (method == "auto" and n >= BRUTE_FORCE_BELOW):
        result = _pairs_cells(X0, lattice, shifts, r_cut)
    if result is None:
        result = _pairs_brute(X0, lattice, shifts, r_cut)
    i, j, sidx, vec = result
    d = np.sqrt(np.einsum("ij,ij->i", vec, vec))
    home = np.flatnonzero(np.all(shifts == 0, axis=1))[0]
    self_pair = (i == j) & (sidx == home)
    i, j, sidx, vec, d = i[~self_pair], j[~self_pair], sidx[~self_pair], vec[~self_pair], d[~self_pair]
    if d.size and d.min() < OVERLAP_TOL:
        k = int(np.argmin(d))
        raise OverlappingAtomsError(
            f"atoms {int(i[k])} and {int(j[k])} are {d[k]:.3g} Å apart (< {OVERLAP_TOL} Å)"
        )
    # shift relative to the unwrapped input positions
    sh = shifts[sidx] + wrap_off[i] - wrap_off[j]
    order = np.lexsort((sh[:, 2], sh[:, 1], sh[:, 0], j, i))
    i, j, sh = i[order], j[order], sh[order]
    # exact displacements from the caller's positions
    vec = s.positions[i] - s.positions[j] - sh @ lattice
    d = np.sqrt(np.einsum("ij,ij->i", vec, vec))
    return AtomGraph(n, i.astype(np.int64), j.astype(np.int64), sh.astype(np.int64), vec, d, float(r_cut))


class NeighborList:
    """Verlet list: pairs are searched at ``r_cut + skin`` and filtered to
    ``r_cut`` until some atom has moved more than ``skin / 2``.

    The returned graphs equal ``build_atom_graph(s, r_cut)`` exactly (same
    edges, same order), so results do not depend on when it rebuilds.
    Positions must be continuous between calls (not re-wrapped); a wrapped
    jump only triggers a rebuild.
    """

    def __init__(self, r_cut: float, skin: float = 1.0):
        if r_cut <= 0 or skin < 0:
            raise ValidationError("r_cut must be positive and skin non-negative")
        self.r_cut = float(r_cut)
        self.skin = float(skin)
        self.rebuilds = 0
        self._cand = None
        self._key = None
        self._ref = None

    def _stale(self, s: Structure) -> bool:
        if self._cand is None or s.positions.shape != self._ref.shape:
            return True
        key = (s.numbers.tobytes(), s.lattice.tobytes(), tuple(s.pbc))
        if key != self._key:
            return True
        moved = np.einsum("ij,ij->i", s.positions - self._ref, s.positions - self._ref)
        return bool(moved.size) and float(moved.max()) > (0.5 * self.skin) ** 2

    def graph(self, s: Structure) -> AtomGraph:
        if self._stale(s):
            self._cand = build_atom_graph(s, self.r_cut + self.skin)
            self._key = (s.numbers.tobytes(), s.lattice.tobytes(), tuple(s.pbc))
            self._ref = s.positions.copy()
            self.rebuilds += 1
        c = self._cand
        lattice = s.lattice if s.periodic else np.zeros((3, 3))
        vec = s.positions[c.targets] - s.positions[c.sources] - c.shifts @ lattice
        d = np.sqrt(np.einsum("ij,ij->i", vec, vec))
        keep = d <= self.r_cut
        if keep.any() and d[keep].min() < OVERLAP_TOL:
            k = np.flatnonzero(keep)[int(np.argmin(d[keep]))]
            raise OverlappingAtomsError(
                f"atoms {int(c.targets[k])} and {int(c.sources[k])} are {d[k]:.3g} Å apart (< {OVERLAP_TOL} Å)"
            )
        return AtomGraph(len(s), c.targets[keep], c.sources[keep], c.shifts[keep], vec[keep], d[keep], self.r_cut)


def build_line_graph(g: AtomGraph, r_cut: float) -> LineGraph:
    """Bonds within ``r_cut`` become nodes; unordered pairs of them sharing a
    source atom become angles."""
    if r_cut > g.r_cut + 1e-12:
        raise ValidationError(f"line-graph cutoff {r_cut} exceeds atom-graph cutoff {g.r_cut}")
    nodes = np.flatnonzero(g.distances <= r_cut).astype(np.int64)
    src = g.sources[nodes]
    order = np.argsort(src, kind="stable")
    grouped_src = src[order]
    n_nodes = len(nodes)
    if n_nodes == 0:
        return LineGraph(nodes, np.zeros((0, 2), np.int64), np.zeros(0, np.int64), np.zeros(0), float(r_cut))
    starts = np.flatnonzero(np.r_[True, grouped_src[1:] != grouped_src[:-1]])
    ends = np.r_[starts[1:], n_nodes]
    group_end = np.repeat(ends, ends - starts)
    partners = group_end - np.arange(n_nodes) - 1
    total = int(partners.sum())
    first = np.repeat(np.arange(n_nodes), partners)
    within = np.arange(total) - np.repeat(np.cumsum(partners) - partners, partners)
    second = first + 1 + within
    a, b = order[first], order[second]
    pairs = np.stack([a, b], axis=1).astype(np.int64)
    units = g.units[nodes]
    cosines = np.einsum("ij,ij->i", units[a], units[b]) if total else np.zeros(0)
    centers = src[a]
    return LineGraph(nodes, pairs, centers.astype(np.int64), np.clip(cosines, -1.0, 1.0), float(r_cut))


def dump_graphs(g: AtomGraph, lg: LineGraph | None = None) -> str:
    """Plain-text listing of edges (and angles) for fixtures and debugging."""
    lines = [f"# atom graph: {g.n_atoms} atoms, {g.n_edges} edges, r_cut={g.r_cut}"]
    for k, (i, j, s) in enumerate(g.edges):
        lines.append(f"edge {k} {i} {j} {s[0]} {s[1]} {s[2]} {g.distances[k]:.12f}")
    if lg is not None:
        lines.append(f"# line graph: {lg.n_nodes} nodes, {lg.n_angles} angles, r_cut={lg.r_cut}")
        for k, (a, b, c) in enumerate(lg.angle_pairs):
            lines.append(f"angle {k} {a} {b} {c} {lg.cosines[k]:.12f}")
    return "\n".join(lines) + "\n"
