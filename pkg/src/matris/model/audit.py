"""Finite-difference check of the derivative heads (forces and stress)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..structio import Structure
from .config import ModelConfig
from .network import GraphBatch, forward, predict


@dataclass
class AuditReport:
    force_error: float  # max |F_ad - F_fd| / max |F_fd|
    stress_error: float | None  # same for stress; None for non-periodic input
    max_force: float
    max_stress: float

    def worst(self) -> float:
        return max(self.force_error, self.stress_error or 0.0)


def _energy(structure: Structure, params, cfg: ModelConfig) -> float:
    batch = GraphBatch([structure], cfg)
    return float(predict(batch, params, cfg, forces=False, stress=False).energy.data[0])


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = float(np.abs(b).max()) if b.size else 0.0
    return float(np.abs(a - b).max()) / max(scale, 1e-12) if a.size else 0.0


def strained(structure: Structure, eps: np.ndarray) -> Structure:
    """Positions and cell mapped by ``x -> x (I + sym(eps))``."""
    sym = 0.5 * (eps + eps.T)
    M = np.eye(3) + sym
    return Structure(structure.numbers, structure.positions @ M, structure.lattice @ M, structure.pbc)


def audit_structure(structure: Structure, params, config: ModelConfig | None = None, *,
                    h: float = 1e-4, h_strain: float = 1e-5) -> AuditReport:
    """Compare forces and stress with central differences of the energy.

    Forces use steps of ``h`` Å per coordinate; stress uses strain steps of
    ``h_strain``. The cell is held fixed for the force check. The graph is
    rebuilt at every displaced geometry.
    """
    cfg = config or params.config
    out = forward(structure, params, cfg, stress=True)
    n = len(structure)
    fd = np.zeros((n, 3))
    for i in range(n):
        for a in range(3):
            x = structure.positions.copy()
            x[i, a] += h
            ep = _energy(Structure(structure.numbers, x, structure.lattice, structure.pbc), params, cfg)
            x[i, a] -= 2 * h
            em = _energy(Structure(structure.numbers, x, structure.lattice, structure.pbc), params, cfg)
            fd[i, a] = -(ep - em) / (2 * h)
    force_err = _rel(out.forces, fd)
    stress_err = None
    if structure.periodic:
        vol = structure.volume
        sd = np.zeros((3, 3))
        for a in range(3):
            for b in range(3):
                e = np.zeros((3, 3))
                e[a, b] = h_strain
                ep = _energy(strained(structure, e), params, cfg)
                em = _energy(strained(structure, -e), params, cfg)
                sd[a, b] = (ep - em) / (2 * h_strain) / vol
        stress_err = _rel(out.stress, sd)
    return AuditReport(force_err, stress_err, float(np.abs(fd).max(initial=0.0)),
                       float(np.abs(out.stress).max(initial=0.0)))
