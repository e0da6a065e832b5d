"""Full forward pass: graphs -> energies, forces, stress, magmoms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Segments, Tape, Value
from ..graphgen import AtomGraph, NeighborList, build_atom_graph, build_line_graph
from ..structio import Structure
from . import layers as L
from .config import ModelConfig
from .params import ParameterSet

__all__ = ["GraphBatch", "ModelOutput", "Prediction", "evaluate", "predict", "forward", "MatrisPotential"]

# index permutation taking a flattened 3x3 matrix to its transpose
_TRANSPOSE9 = np.eye(9)[[0, 3, 6, 1, 4, 7, 2, 5, 8]]


class GraphBatch:
    """Several structures merged into one disconnected graph.

    Holds only topology and constants; geometry is recomputed on the tape
    from positions (and strain) so that it can be differentiated.
    """

    def __init__(self, structures, config: ModelConfig, graphs=None):
        structures = list(structures)
        if graphs is None:
            graphs = []
            for s in structures:
                g = build_atom_graph(s, config.r_cut_a)
                graphs.append((g, build_line_graph(g, config.r_cut_l)))
        self.structures = structures
        self.config = config
        self.n_structures = len(structures)
        counts = np.array([len(s) for s in structures], dtype=np.int64)
        self.atom_counts = counts
        atom_off = np.r_[0, np.cumsum(counts)[:-1]].astype(np.int64)
        self.n_atoms = int(counts.sum())
        self.numbers = np.concatenate([s.numbers for s in structures]) if structures else np.zeros(0, np.int64)
        self.positions = np.concatenate([s.positions for s in structures]) if structures else np.zeros((0, 3))
        self.atom_struct = np.repeat(np.arange(self.n_structures), counts)
        self.lattices = np.array([s.lattice if s.periodic else np.zeros((3, 3)) for s in structures]).reshape(-1, 3, 3)
        self.periodic = np.array([s.periodic for s in structures], dtype=bool)
        self.volumes = np.array([s.volume if s.periodic else 0.0 for s in structures])

        tgt, src, offv, e_struct, nodes, pairs = [], [], [], [], [], []
        edge_base = 0
        node_base = 0
        self.edge_counts = []
        for k, (g, lg) in enumerate(graphs):
            tgt.append(g.targets + atom_off[k])
            src.append(g.sources + atom_off[k])
            offv.append(g.shifts @ self.lattices[k])
            e_struct.append(np.full(g.n_edges, k, dtype=np.int64))
            nodes.append(lg.nodes + edge_base)
            pairs.append(lg.pairs + node_base)
            self.edge_counts.append(g.n_edges)
            edge_base += g.n_edges
            node_base += lg.n_nodes
        cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape, dtype=np.int64)  # noqa: E731
        self.targets = cat(tgt, (0,)).astype(np.int64)
        self.sources = cat(src, (0,)).astype(np.int64)
        self.edge_offsets = np.concatenate(offv).reshape(-1, 3) if offv else np.zeros((0, 3))
        self.edge_struct = cat(e_struct, (0,)).astype(np.int64)
        self.n_edges = len(self.targets)
        self.line_nodes = cat(nodes, (0,)).astype(np.int64)
        self.pairs = np.concatenate(pairs).reshape(-1, 2).astype(np.int64) if pairs else np.zeros((0, 2), np.int64)
        self.n_line_nodes = len(self.line_nodes)
        self.n_angles = len(self.pairs)

        N, E, P = self.n_atoms, self.n_edges, self.n_angles
        self.seg_struct = Segments(self.atom_struct, self.n_structures)
        self.seg_tgt = Segments(self.targets, N)
        self.seg_src = Segments(self.sources, N)
        self.seg_edge_struct = Segments(self.edge_struct, self.n_structures)
        self.seg_line_nodes = Segments(self.line_nodes, E)
        # every unordered angle becomes two directed line-graph edges
        ltgt = np.r_[self.pairs[:, 0], self.pairs[:, 1]]
        lsrc = np.r_[self.pairs[:, 1], self.pairs[:, 0]]
        self.line_pair_of_edge = np.r_[np.arange(P), np.arange(P)]
        self.seg_ltgt = Segments(ltgt, self.n_line_nodes)
        self.seg_lsrc = Segments(lsrc, self.n_line_nodes)
        self.seg_pair_a = Segments(self.pairs[:, 0], self.n_line_nodes)
        self.seg_pair_b = Segments(self.pairs[:, 1], self.n_line_nodes)


@dataclass
class ModelOutput:
    """Predictions for one structure (eV, eV/Å, eV/Å³, μB)."""

    energy: float
    forces: np.ndarray
    stress: np.ndarray
    atom_energies: np.ndarray
    magmoms: np.ndarray | None = None
    ref_energy: float = 0.0


@dataclass
class Prediction:
    """Tape-level outputs for a batch; fields are Values."""

    energy: Value  # (B,)
    atom_energies: Value  # (N, 1)
    ref_energy: np.ndarray  # (B,)
    magmoms: Value | None
    noise: Value | None
    forces: Value | None = None
    stress: Value | None = None  # (B, 3, 3)


@dataclass
class DenoiseInputs:
    """Conditioning for noise prediction: step per structure, projected force per edge."""

    t: np.ndarray
    t_max: float
    projected_forces: np.ndarray


def _symmetric(strain: Value) -> Value:
    B = strain.shape[0]
    flat = ad.reshape(strain, (B, 9))
    sym = (flat + ad.matmul(flat, _TRANSPOSE9)) * 0.5
    return ad.reshape(sym, (B, 3, 3))


def edge_geometry(batch: GraphBatch, positions: Value, strain: Value | None):
    """Edge vectors (source -> target), lengths and unit vectors on the tape."""
    X = positions
    offsets = ad.constant(batch.edge_offsets)
    if strain is not None:
        eps = _symmetric(strain)
        X = X + ad.einsum("ni,nij->nj", X, ad.take(eps, batch.seg_struct))
        offsets = offsets + ad.einsum("ni,nij->nj", offsets, ad.take(eps, batch.seg_edge_struct))
    vec = ad.take(X, batch.seg_tgt) - ad.take(X, batch.seg_src) - offsets
    r = ad.power(ad.sum(vec * vec, axis=1, keepdims=True), 0.5)
    return vec, r, vec / r


def evaluate(
    batch: GraphBatch,
    params,
    config: ModelConfig,
    positions: Value,
    strain: Value | None = None,
    denoise: DenoiseInputs | None = None,
) -> Prediction:
    """Record the network on the tape (energies, optional magmoms / noise)."""
    cfg = config
    p = params
    vec, r, unit = edge_geometry(batch, positions, strain)
    E = batch.n_edges

    v = L.embed_atoms(batch.numbers, p)
    if denoise is not None:
        tf = L.time_features(denoise.t, denoise.t_max, cfg.n_time_features)[batch.atom_struct]
        v = v + ad.matmul(tf, p["denoise.time.W"])

    if E:
        e0 = L.bessel_basis(ad.reshape(r, (-1,)), cfg.r_cut_a, cfg.n_bessel, cfg.envelope_p)
        w_atom = L.polynomial_envelope(r * (1.0 / cfg.r_cut_a), cfg.envelope_p)
        e = L.linear(e0, p, "embed.bond")
        if denoise is not None:
            pf = np.asarray(denoise.projected_forces, dtype=np.float64).reshape(-1, 1)
            e = e + ad.matmul(pf, p["denoise.force.W"])

    have_line = batch.n_angles > 0
    if have_line:
        r_node = ad.take(r, batch.line_nodes)
        u_node = ad.take(unit, batch.line_nodes)
        cos = ad.sum(ad.take(u_node, batch.seg_pair_a) * ad.take(u_node, batch.seg_pair_b), axis=1)
        theta = ad.arccos_clamped(cos)
        a = L.linear(L.fourier_basis(theta, cfg.m_max), p, "embed.angle")
        a = ad.take(a, batch.line_pair_of_edge)
        w_node = L.polynomial_envelope(r_node * (1.0 / cfg.r_cut_l), cfg.envelope_p)
        w_line = ad.take(w_node, batch.seg_ltgt) * ad.take(w_node, batch.seg_lsrc)

    for n in range(cfg.n_layers if E else 0):
        pre = f"layer{n}"
        if have_line:
            bond = ad.take(e, batch.seg_line_nodes)
            bond_out, a_out = L.attention_layer(
                bond, a, batch.seg_ltgt, batch.seg_lsrc, p, f"{pre}.line",
                weights=w_line, separable=cfg.separable_attention,
            )
            e = e + ad.segment_sum(w_node * bond_out, batch.seg_line_nodes)
            a = a + a_out
        v_att, e_att = L.attention_layer(
            v, e, batch.seg_tgt, batch.seg_src, p, f"{pre}.atom",
            weights=w_atom, separable=cfg.separable_attention,
        )
        dv, de = L.refinement_layer(
            v_att, e_att, e0, batch.seg_tgt, batch.seg_src, p, f"{pre}.refine",
            envelope=None if cfg.learnable_envelope else w_atom,
        )
        v = v + dv
        e = e + de

    h = L.layer_norm(v, p, "readout.norm")
    atom_e = L.mlp(h, p, "readout.energy")
    ref = ad.constant(p["ref_energies"]).data[batch.numbers]
    ref_struct = batch.seg_struct.reduce(ref)
    energy = ad.reshape(ad.segment_sum(atom_e, batch.seg_struct), (-1,)) + ref_struct
    magmoms = ad.reshape(L.mlp(v, p, "readout.magmom"), (-1,)) if cfg.with_magmom else None
    noise = None
    if denoise is not None:
        if E:
            c = L.mlp(e, p, "denoise.head")
            noise = ad.segment_sum(c * unit, batch.seg_tgt)
        else:
            noise = ad.constant(np.zeros((batch.n_atoms, 3)))
    return Prediction(energy, atom_e, ref_struct, magmoms, noise)


def predict(
    batch: GraphBatch,
    params,
    config: ModelConfig,
    *,
    forces: bool = True,
    stress: bool = True,
    create_graph: bool = False,
    tape: Tape | None = None,
    denoise: DenoiseInputs | None = None,
) -> Prediction:
    """Evaluate the network and derive forces and stress on one tape.

    ``params`` may hold arrays (inference) or tracked Values from ``tape``
    (training, with ``create_graph=True`` so force losses can be differentiated).
    """
    tape = tape or Tape()
    X = tape.leaf(batch.positions, name="positions")
    eps = tape.leaf(np.zeros((batch.n_structures, 3, 3)), name="strain") if stress else None
    pred = evaluate(batch, params, config, X, eps, denoise)
    if not (forces or stress):
        return pred
    total = ad.sum(pred.energy)
    if total.tape is None:
        # nothing depends on positions (e.g. batch of isolated atoms)
        pred.forces = ad.constant(np.zeros((batch.n_atoms, 3)))
        pred.stress = ad.constant(np.zeros((batch.n_structures, 3, 3)))
        return pred
    wrt = [X] + ([eps] if stress else [])
    grads = ad.backward(total, wrt, create_graph=create_graph)
    gX = grads[X] if create_graph else ad.constant(grads[X])
    pred.forces = -gX
    if stress:
        vol = np.where(batch.volumes > 0, batch.volumes, 1.0)
        scale = np.where(batch.periodic, 1.0 / vol, 0.0).reshape(-1, 1, 1)
        ge = grads[eps] if create_graph else ad.constant(grads[eps])
        pred.stress = ge * scale
    return pred


def forward(
    structure: Structure,
    params: ParameterSet,
    config: ModelConfig | None = None,
    *,
    stress: bool = True,
    graph: AtomGraph | None = None,
) -> ModelOutput:
    """Energy, forces, stress (and magmoms) for one structure.

    ``graph`` may supply a prebuilt atom graph at ``config.r_cut_a``.
    """
    config = config or params.config
    graphs = None
    if graph is not None:
        graphs = [(graph, build_line_graph(graph, config.r_cut_l))]
    batch = GraphBatch([structure], config, graphs)
    pred = predict(batch, params, config, forces=True, stress=stress)
    st = pred.stress.data[0] if stress else np.zeros((3, 3))
    return ModelOutput(
        energy=float(pred.energy.data[0]),
        forces=np.array(pred.forces.data),
        stress=np.array(st),
        atom_energies=np.array(pred.atom_energies.data[:, 0]),
        magmoms=None if pred.magmoms is None else np.array(pred.magmoms.data),
        ref_energy=float(pred.ref_energy[0]),
    )


class MatrisPotential:
    """Callable energy/force model for the simulation drivers."""

    def __init__(self, params: ParameterSet, config: ModelConfig | None = None, *, stress: bool = False, skin: float = 1.0):
        self.params = params
        self.config = config or params.config
        self.stress = stress
        # successive MD frames reuse one Verlet list; skin 0 rebuilds every call
        self.neighbors = NeighborList(self.config.r_cut_a, skin) if skin > 0 else None

    def __call__(self, structure: Structure) -> tuple[float, np.ndarray]:
        g = self.neighbors.graph(structure) if self.neighbors else None
        out = forward(structure, self.params, self.config, stress=self.stress, graph=g)
        return out.energy, out.forces

    def compute(self, structure: Structure) -> ModelOutput:
        return forward(structure, self.params, self.config, stress=True)
