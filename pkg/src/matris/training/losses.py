"""Element-wise penalties, graph-level reduction and the weighted objective.

Everything here is written in tape ops so losses can be differentiated
with respect to the model parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..errors import ValidationError
from ..model.network import GraphBatch, Prediction

log = logging.getLogger(__name__)

# eV/Å^3 -> GPa
EV_A3_TO_GPA = 160.21766208


def huber(residual, delta: float = 0.01):
    """``0.5 e^2`` for ``|e| <= delta``, else ``delta (|e| - 0.5 delta)``."""
    if delta <= 0:
        raise ValidationError("huber delta must be positive")
    e = ad.constant(residual) if not isinstance(residual, ad.Value) else residual
    a = ad.absolute(e)
    inner = (a.data <= delta).astype(np.float64)
    return (e * e) * (0.5 * inner) + (a - 0.5 * delta) * (delta * (1.0 - inner))


def mae(residual):
    return ad.absolute(residual)


def _penalty(residual, kind: str, delta: float, vector: bool = False):
    """Per-row penalty; ``vector`` rows are scored as a whole by l2mae."""
    if kind == "huber":
        return huber(residual, delta)
    if kind == "mae":
        return mae(residual)
    if kind == "l2mae":
        if vector:
            # tiny shift keeps the gradient finite at a zero residual
            return ad.power(ad.sum(residual * residual, axis=1, keepdims=True) + 1e-24, 0.5)
        return mae(residual)
    raise ValidationError(f"unknown loss kind {kind!r}")


def graph_level_loss(per_node, graph_ids, n_graphs: int | None = None, *, n_total: int | None = None):
    """``(1/B) sum_b (1/N_b) sum_{i in b} l_i``.

    ``per_node`` is (N,) or (N, k); rows with several columns are averaged
    first. Empty graphs are dropped with a warning. ``n_total`` overrides
    ``B`` when the batch is split across workers.
    """
    ids = np.asarray(graph_ids, dtype=np.int64).reshape(-1)
    n_graphs = int(ids.max()) + 1 if n_graphs is None and ids.size else int(n_graphs or 0)
    counts = np.bincount(ids, minlength=n_graphs).astype(np.float64)
    nonempty = counts > 0
    if not nonempty.all():
        log.warning("%d empty graph(s) excluded from the loss", int((~nonempty).sum()))
    B = int(nonempty.sum()) if n_total is None else int(n_total)
    if B == 0:
        raise ValidationError("graph-level loss over zero nonempty graphs")
    x = per_node if isinstance(per_node, ad.Value) else ad.constant(np.asarray(per_node, dtype=np.float64))
    k = x.shape[1] if x.ndim == 2 else 1
    w = 1.0 / (counts[ids] * k * B)
    w = w.reshape(-1, 1) if x.ndim == 2 else w
    return ad.sum(x * w)


def naive_loss(per_node, *, n_total: int | None = None):
    """Mean over every node and column of the batch (large graphs dominate)."""
    x = per_node if isinstance(per_node, ad.Value) else ad.constant(np.asarray(per_node, dtype=np.float64))
    n = x.size if n_total is None else n_total * (x.shape[1] if x.ndim == 2 else 1)
    if n == 0:
        raise ValidationError("loss over zero nodes")
    return ad.sum(x) * (1.0 / n)


@dataclass
class LabelCounts:
    """How many graphs / atoms carry each label, for normalising a loss that
    is split over several workers."""

    energy: int = 0
    force_graphs: int = 0
    force_atoms: int = 0
    stress: int = 0
    magmom_graphs: int = 0
    magmom_atoms: int = 0

    def __add__(self, o: LabelCounts) -> LabelCounts:
        return LabelCounts(*(a + b for a, b in zip(self.astuple(), o.astuple())))

    def astuple(self):
        return (self.energy, self.force_graphs, self.force_atoms, self.stress, self.magmom_graphs, self.magmom_atoms)


def label_counts(structures) -> LabelCounts:
    c = LabelCounts()
    for s in structures:
        n = len(s)
        c.energy += s.energy is not None and n > 0
        if s.forces is not None and n:
            c.force_graphs += 1
            c.force_atoms += n
        c.stress += s.stress is not None and s.periodic
        if s.magmoms is not None and n:
            c.magmom_graphs += 1
            c.magmom_atoms += n
    return c


@dataclass
class LossTerms:
    total: ad.Value
    components: dict = field(default_factory=dict)  # unweighted term values
    skipped: list = field(default_factory=list)


def _node_weights(batch: GraphBatch, has, n_graphs: int, n_atoms: int, graph_level: bool):
    """Per-atom weights that turn a sum into the requested reduction."""
    mask = has[batch.atom_struct]
    if graph_level:
        w = 1.0 / (batch.atom_counts[batch.atom_struct] * float(n_graphs))
    else:
        w = np.full(batch.n_atoms, 1.0 / float(n_atoms))
    return np.where(mask, w, 0.0)


def total_loss(pred: Prediction, batch: GraphBatch, cfg, counts: LabelCounts | None = None) -> LossTerms:
    """Weighted sum of energy, force, stress and magmom terms.

    ``cfg`` is a :class:`TrainConfig`. Energies are compared per atom; stress
    in GPa. Terms whose labels are absent (or whose weight is 0) are skipped
    and listed in ``skipped``; ``counts`` holds the label counts of the whole
    global batch when this shard is one of several.
    """
    structs = batch.structures
    counts = counts or label_counts(structs)
    kind, delta = cfg.loss, cfg.huber_delta
    total = None
    comps, skipped = {}, []

    def add(name, weight, value):
        nonlocal total
        comps[name] = float(value.data)
        term = value * weight
        total = term if total is None else total + term

    has_e = np.array([s.energy is not None for s in structs])
    if cfg.energy_weight > 0 and counts.energy:
        if has_e.any():
            y = np.array([s.energy if s.energy is not None else 0.0 for s in structs])
            n = batch.atom_counts.astype(np.float64)
            res = (pred.energy - y) * (1.0 / np.maximum(n, 1.0))
            w = np.where(has_e, 1.0 / counts.energy, 0.0)
            add("energy", cfg.energy_weight, ad.sum(_penalty(res, kind, delta) * w))
        else:
            comps["energy"] = 0.0
    else:
        skipped.append("energy")

    has_f = np.array([s.forces is not None for s in structs])
    if cfg.force_weight > 0 and counts.force_graphs and pred.forces is not None:
        if has_f.any():
            y = np.concatenate([s.forces if s.forces is not None else np.zeros((len(s), 3)) for s in structs])
            res = pred.forces - y
            w = _node_weights(batch, has_f, counts.force_graphs, counts.force_atoms, cfg.graph_level_loss)
            if kind == "l2mae":
                pen, w = _penalty(res, kind, delta, vector=True), w.reshape(-1, 1)
            else:
                pen, w = _penalty(res, kind, delta), w.reshape(-1, 1) / 3.0
            add("force", cfg.force_weight, ad.sum(pen * w))
        else:
            comps["force"] = 0.0
    else:
        skipped.append("force")

    has_s = np.array([s.stress is not None and s.periodic for s in structs])
    if cfg.stress_weight > 0 and counts.stress and pred.stress is not None:
        if has_s.any():
            y = np.array([s.stress if s.stress is not None else np.zeros((3, 3)) for s in structs])
            res = (pred.stress - y) * EV_A3_TO_GPA
            w = np.where(has_s, 1.0 / (9.0 * counts.stress), 0.0).reshape(-1, 1, 1)
            add("stress", cfg.stress_weight, ad.sum(_penalty(res, kind, delta) * w))
        else:
            comps["stress"] = 0.0
    else:
        skipped.append("stress")

    has_m = np.array([s.magmoms is not None for s in structs])
    if cfg.magmom_weight > 0 and counts.magmom_graphs and pred.magmoms is not None:
        if has_m.any():
            y = np.concatenate([s.magmoms if s.magmoms is not None else np.zeros(len(s)) for s in structs])
            res = pred.magmoms - y
            w = _node_weights(batch, has_m, counts.magmom_graphs, counts.magmom_atoms, cfg.graph_level_loss)
            add("magmom", cfg.magmom_weight, ad.sum(_penalty(res, kind, delta) * w))
        else:
            comps["magmom"] = 0.0
    else:
        skipped.append("magmom")

    if total is None:
        if len(skipped) == 4:
            raise ValidationError("no loss term has labels (energy, forces, stress, magmoms all missing)")
        total = ad.constant(0.0)
    return LossTerms(total, comps, skipped)


def denoise_loss(noise_pred, eps, mask, batch: GraphBatch, *, n_graphs: int | None = None,
                 n_atoms: int | None = None, graph_level: bool = True):
    """Mean squared error of the predicted noise over corrupted atoms."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return ad.constant(0.0)
    per_graph = np.bincount(batch.atom_struct[mask], minlength=batch.n_structures)
    if graph_level:
        B = int((per_graph > 0).sum()) if n_graphs is None else n_graphs
        w = np.where(mask, 1.0 / (np.maximum(per_graph[batch.atom_struct], 1) * 3.0 * B), 0.0)
    else:
        n = int(mask.sum()) if n_atoms is None else n_atoms
        w = np.where(mask, 1.0 / (3.0 * n), 0.0)
    d = noise_pred - eps
    return ad.sum(d * d * w.reshape(-1, 1))
