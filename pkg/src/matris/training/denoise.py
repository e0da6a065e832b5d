"""Position corruption for noise-prediction pretraining."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..errors import ValidationError
from ..graphgen import AtomGraph, build_atom_graph
from ..structio import Structure


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear schedule ``sigma_t = sigma_min + (t / t_max)(sigma_max - sigma_min)`` in Å."""

    t_max: int = 1000
    sigma_min: float = 0.0
    sigma_max: float = 1.0
    kind: str = "linear"
    corruption_probability: float = 1.0

    def __post_init__(self) -> None:
        if self.t_max < 1:
            raise ValidationError("t_max must be >= 1")
        if not 0 <= self.sigma_min <= self.sigma_max:
            raise ValidationError("need 0 <= sigma_min <= sigma_max")
        if self.kind != "linear":
            raise ValidationError(f"unsupported noise schedule {self.kind!r} (only 'linear')")
        if not 0 < self.corruption_probability <= 1:
            raise ValidationError("corruption_probability must lie in (0, 1]")

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any((t < 0) | (t > self.t_max)):
            raise ValidationError(f"t must lie in [0, {self.t_max}]")
        return self.sigma_min + (t / self.t_max) * (self.sigma_max - self.sigma_min)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NoiseSchedule:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown noise config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Corruption:
    structure: Structure  # noisy positions, no labels
    graph: AtomGraph  # atom graph of the noisy structure
    projected_forces: np.ndarray  # (n_edges,)
    t: int
    sigma: float
    eps: np.ndarray  # (n_atoms, 3); zero rows for untouched atoms
    mask: np.ndarray  # corrupted atoms


def project_forces(graph: AtomGraph, forces: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """``<F_i, unit_ij>`` for every edge with target ``i`` (0 where ``i`` is unmasked)."""
    if graph.n_edges == 0:
        return np.zeros(0)
    proj = np.einsum("ij,ij->i", forces[graph.targets], graph.units)
    if mask is not None:
        proj = np.where(mask[graph.targets], proj, 0.0)
    return proj


def denoise_corrupt(structure: Structure, schedule: NoiseSchedule, rng: np.random.Generator,
                    r_cut: float, *, t: int | None = None) -> Corruption:
    """Select atoms with the corruption probability, draw ``t`` uniformly from
    1..t_max (unless given) and displace the selected atoms by ``sigma_t eps``.

    Forces are projected onto the edges of the noisy graph, the one the model
    sees. The returned ``eps`` is exactly the displacement divided by sigma.
    """
    if structure.forces is None:
        raise ValidationError("denoising needs force labels")
    n = len(structure)
    mask = rng.random(n) < schedule.corruption_probability
    if t is None:
        t = int(rng.integers(1, schedule.t_max + 1))
    sigma = float(schedule.sigma(t))
    eps = rng.standard_normal((n, 3)) * mask[:, None]
    noisy = Structure(structure.numbers, structure.positions + sigma * eps, structure.lattice, structure.pbc)
    g = build_atom_graph(noisy, r_cut)
    return Corruption(noisy, g, project_forces(g, structure.forces, mask), t, sigma, eps, mask)
