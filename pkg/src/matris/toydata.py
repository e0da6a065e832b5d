"""Closed-form reference potentials and the toy datasets built from them."""

from __future__ import annotations

import math

import numpy as np

from .errors import ValidationError
from .graphgen import build_atom_graph
from .structio import Structure

__all__ = [
    "LennardJones",
    "HarmonicDimer",
    "HarmonicWell",
    "fcc_cell",
    "generate",
    "TOY_KINDS",
]

TOY_KINDS = ("lj-crystal", "lj-liquid", "harmonic-dimer")

# argon-like parameters
AR_EPSILON = 0.0104  # eV
AR_SIGMA = 3.405  # Å
# toy labels use a cutoff no longer than the model's default atom-graph cutoff
TOY_LJ_CUTOFF = 5.0


class LennardJones:
    """Shifted-force Lennard-Jones pair potential truncated at ``r_cut``.

    ``V(r) = 4 eps ((s/r)^12 - (s/r)^6)``, with ``V(r_c)`` and ``V'(r_c)``
    subtracted so energy and force both vanish at the cutoff.
    """

    def __init__(self, epsilon: float = AR_EPSILON, sigma: float = AR_SIGMA, r_cut: float = 6.0):
        if epsilon <= 0 or sigma <= 0 or r_cut <= 0:
            raise ValidationError("epsilon, sigma and r_cut must be positive")
        self.epsilon, self.sigma, self.r_cut = float(epsilon), float(sigma), float(r_cut)
        self._vc, self._dvc = self._raw(np.array([self.r_cut]))
        self._vc, self._dvc = float(self._vc[0]), float(self._dvc[0])

    def _raw(self, r):
        sr6 = (self.sigma / r) ** 6
        v = 4.0 * self.epsilon * (sr6 * sr6 - sr6)
        dv = 4.0 * self.epsilon * (-12.0 * sr6 * sr6 + 6.0 * sr6) / r
        return v, dv

    def pair(self, r):
        """Pair energy and its derivative at distances ``r`` (< r_cut)."""
        v, dv = self._raw(r)
        return v - self._vc - (r - self.r_cut) * self._dvc, dv - self._dvc

    def compute(self, s: Structure):
        """``(energy, forces, stress, atom_energies)``; stress is (1/V) dE/dε."""
        g = build_atom_graph(s, self.r_cut)
        n = len(s)
        forces = np.zeros((n, 3))
        atom_e = np.zeros(n)
        stress = np.zeros((3, 3))
        if g.n_edges:
            # every pair appears in both directions, hence the factor 1/2
            v, dv = self.pair(g.distances)
            unit = g.units
            np.add.at(atom_e, g.targets, 0.5 * v)
            np.add.at(forces, g.targets, -dv[:, None] * unit)
            if s.periodic:
                vir = 0.5 * np.einsum("e,ea,eb->ab", dv / g.distances, g.vectors, g.vectors)
                stress = vir / s.volume
        return float(atom_e.sum()), forces, stress, atom_e

    def __call__(self, s: Structure):
        e, f, _, _ = self.compute(s)
        return e, f

    def label(self, s: Structure) -> Structure:
        e, f, st, _ = self.compute(s)
        return Structure(s.numbers, s.positions, s.lattice, s.pbc, energy=e, forces=f,
                         stress=st if s.periodic else None)

    @property
    def r_min(self) -> float:
        return 2.0 ** (1.0 / 6.0) * self.sigma


class HarmonicDimer:
    """``E = k/2 (r - r0)^2`` between atoms 0 and 1."""

    def __init__(self, k: float = 10.0, r0: float = 1.0):
        self.k, self.r0 = float(k), float(r0)

    def __call__(self, s: Structure):
        d = s.positions[0] - s.positions[1]
        r = float(np.linalg.norm(d))
        u = d / r
        f0 = -self.k * (r - self.r0) * u
        forces = np.zeros((len(s), 3))
        forces[0], forces[1] = f0, -f0
        return 0.5 * self.k * (r - self.r0) ** 2, forces


class HarmonicWell:
    """Independent isotropic wells ``E = k/2 sum_i |x_i - c_i|^2``."""

    def __init__(self, centers, k: float = 600.0):
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        self.k = float(k)

    def __call__(self, s: Structure):
        d = s.positions - self.centers
        return 0.5 * self.k * float(np.sum(d * d)), -self.k * d


def fcc_cell(a: float, reps=(2, 2, 4), z: int = 18) -> Structure:
    basis = np.array([[0, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0.5], [0, 0.5, 0.5]])
    cells = np.array([[i, j, k] for i in range(reps[0]) for j in range(reps[1]) for k in range(reps[2])])
    frac = (cells[:, None, :] + basis[None]).reshape(-1, 3)
    lattice = np.diag(np.asarray(reps, dtype=np.float64) * a)
    return Structure(np.full(len(frac), z), frac * a, lattice, (True, True, True))


def _lj_crystal(n_frames, rng, lj: LennardJones):
    a0 = lj.r_min * math.sqrt(2.0)
    frames = [lj.label(fcc_cell(a0))]
    while len(frames) < n_frames:
        strain = rng.uniform(-0.02, 0.02) * np.eye(3) + rng.normal(0.0, 0.005, (3, 3))
        strain = 0.5 * (strain + strain.T)
        base = fcc_cell(a0)
        M = np.eye(3) + strain
        x = base.positions @ M + rng.normal(0.0, rng.uniform(0.02, 0.12), base.positions.shape)
        frames.append(lj.label(Structure(base.numbers, x, base.lattice @ M, base.pbc)))
    return frames


def _lj_liquid(n_frames, rng, lj: LennardJones, *, density=0.8, T=110.0, dt=4.0, every=25, equil=1500):
    """Snapshots of an NVE trajectory of the reference potential itself,
    with velocity rescaling towards ``T`` during equilibration only."""
    from .simulate import _state, masses_of, maxwell_boltzmann_init, nve_step

    a = (4.0 / (density / lj.sigma**3)) ** (1.0 / 3.0)
    s = fcc_cell(a)
    v = maxwell_boltzmann_init(s, 3.0 * T, int(rng.integers(2**31)))
    e, f = lj(s)
    state = _state(s, v, e, f, 0.0, masses_of(s))
    for step in range(equil):
        state = nve_step(state, lj, dt)
        if step % 10 == 0:
            target = 3.0 * T if step < equil // 3 else T
            state.velocities *= math.sqrt(target / max(state.temperature, 1e-12))
    frames = []
    while len(frames) < n_frames:
        for _ in range(every):
            state = nve_step(state, lj, dt)
        frames.append(lj.label(state.structure))
    return frames


def _harmonic_dimer(n_frames, rng, pot: HarmonicDimer):
    frames = []
    for _ in range(n_frames):
        r = pot.r0 * rng.uniform(0.8, 1.2)
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        x = np.stack([0.5 * r * u, -0.5 * r * u]) + rng.normal(0, 1.0, 3)
        s = Structure(np.array([1, 1]), x)
        e, f = pot(s)
        frames.append(Structure(s.numbers, x, energy=e, forces=f))
    return frames


def generate(kind: str, n_frames: int, seed: int = 0, **options) -> list[Structure]:
    """Toy dataset of ``n_frames`` frames labelled by an analytic potential.

    Lennard-Jones labels use ``r_cut = 5`` Å unless given.
    ``lj-crystal``: strained, rattled 64-atom fcc cells (frame 0 is the
    relaxed lattice); ``lj-liquid``: 64-atom snapshots from reference-potential
    MD; ``harmonic-dimer``: randomly oriented H2-like dimers.
    """
    if n_frames <= 0:
        raise ValidationError("n_frames must be positive")
    rng = np.random.default_rng(seed)
    if kind.startswith("lj-"):
        options.setdefault("r_cut", TOY_LJ_CUTOFF)
    if kind == "lj-crystal":
        return _lj_crystal(n_frames, rng, LennardJones(**options))
    if kind == "lj-liquid":
        lj_keys = {"epsilon", "sigma", "r_cut"}
        lj = LennardJones(**{k: v for k, v in options.items() if k in lj_keys})
        return _lj_liquid(n_frames, rng, lj, **{k: v for k, v in options.items() if k not in lj_keys})
    if kind == "harmonic-dimer":
        return _harmonic_dimer(n_frames, rng, HarmonicDimer(**options))
    raise ValidationError(f"unknown toy dataset kind {kind!r}; choose from {', '.join(TOY_KINDS)}")

