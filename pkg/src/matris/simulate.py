"""Velocity-Verlet NVE dynamics and FIRE relaxation.

Units: Å, fs, eV, amu, K. A *potential* is any callable mapping a
:class:`~matris.structio.Structure` to ``(energy, forces)``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .elements import MASSES
from .errors import NumericalError, ValidationError
from .structio import Structure

__all__ = [
    "KB",
    "MDState",
    "MDResult",
    "RelaxResult",
    "masses_of",
    "kinetic_energy",
    "temperature",
    "maxwell_boltzmann_init",
    "nve_step",
    "run_md",
    "drift_slope",
    "fire_relax",
]

log = logging.getLogger(__name__)

KB = 8.617333262e-5  # eV/K
# 1 amu Å^2 / fs^2 in eV
MV2_TO_EV = 1.66053906660e-27 * 1e10 / 1.602176634e-19  # = 103.6427...

Potential = Callable[[Structure], "tuple[float, np.ndarray]"]


def masses_of(structure: Structure) -> np.ndarray:
    m = MASSES[structure.numbers]
    if np.any(m <= 0):
        raise ValidationError("no mass tabulated for some element")
    return m


def kinetic_energy(velocities: np.ndarray, masses: np.ndarray) -> float:
    return float(0.5 * MV2_TO_EV * np.sum(masses[:, None] * velocities**2))


def temperature(kinetic: float, n_atoms: int) -> float:
    """Instantaneous temperature ``2 KE / (3 N k_B)``."""
    return 2.0 * kinetic / (3.0 * n_atoms * KB) if n_atoms else 0.0


@dataclass
class MDState:
    structure: Structure
    velocities: np.ndarray  # Å/fs
    forces: np.ndarray
    time: float  # fs
    potential: float
    kinetic: float
    temperature: float

    @property
    def total(self) -> float:
        return self.potential + self.kinetic

    @property
    def momentum(self) -> np.ndarray:
        """Total linear momentum, amu Å/fs."""
        return (masses_of(self.structure)[:, None] * self.velocities).sum(axis=0)


def _moved(s: Structure, positions: np.ndarray) -> Structure:
    """Same atoms and cell at new positions, without labels."""
    return Structure(s.numbers, positions, s.lattice, s.pbc, info=dict(s.info))


def _state(structure, velocities, energy, forces, t, masses) -> MDState:
    ke = kinetic_energy(velocities, masses)
    return MDState(structure, velocities, np.asarray(forces), t, float(energy), ke, temperature(ke, len(structure)))


def maxwell_boltzmann_init(structure: Structure, T: float, seed: int = 0) -> np.ndarray:
    """Velocities drawn at temperature ``T`` with the centre-of-mass momentum
    removed, then rescaled so the instantaneous temperature is exactly ``T``."""
    if T < 0:
        raise ValidationError("temperature must be >= 0")
    n = len(structure)
    v = np.zeros((n, 3))
    if T == 0 or n == 0:
        return v
    m = masses_of(structure)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3)) * np.sqrt(KB * T / (m * MV2_TO_EV))[:, None]
    v -= (m[:, None] * v).sum(axis=0) / m.sum()
    ke = kinetic_energy(v, m)
    if ke > 0:
        v *= math.sqrt(T / temperature(ke, n))
    return v


def nve_step(state: MDState, potential: Potential, dt: float) -> MDState:
    """One velocity-Verlet step of ``dt`` fs."""
    if dt <= 0:
        raise ValidationError("dt must be positive")
    s = state.structure
    m = masses_of(s)[:, None] * MV2_TO_EV  # eV fs^2 / Å^2
    a = state.forces / m
    x = s.positions + state.velocities * dt + 0.5 * a * dt * dt
    new = _moved(s, x)
    energy, forces = potential(new)
    forces = np.asarray(forces, dtype=np.float64)
    if not (np.isfinite(energy) and np.all(np.isfinite(forces))):
        raise NumericalError(f"non-finite energy or forces at t = {state.time + dt:g} fs")
    v = state.velocities + 0.5 * (a + forces / m) * dt
    return _state(new, v, energy, forces, state.time + dt, m[:, 0] / MV2_TO_EV)


def drift_slope(times_fs, totals, n_atoms: int) -> float:
    """Least-squares slope of total energy per atom, eV/atom/ps."""
    t = np.asarray(times_fs, dtype=np.float64) * 1e-3
    e = np.asarray(totals, dtype=np.float64) / max(n_atoms, 1)
    if len(t) < 2:
        return 0.0
    return float(np.polyfit(t, e, 1)[0])


@dataclass
class MDResult:
    trajectory: list[MDState]
    drift: float  # eV/atom/ps
    aborted: bool = False
    message: str = ""
    steps: int = 0

    def temperatures(self) -> np.ndarray:
        return np.array([s.temperature for s in self.trajectory])

    def totals(self) -> np.ndarray:
        return np.array([s.total for s in self.trajectory])

    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.trajectory])


def run_md(
    structure: Structure,
    potential: Potential,
    T: float,
    dt: float,
    n_steps: int,
    record_every: int = 10,
    *,
    seed: int = 0,
    velocities: np.ndarray | None = None,
    drift_abort: float | None = 0.05,
    callback: Callable[[MDState], None] | None = None,
) -> MDResult:
    """NVE run from Maxwell-Boltzmann velocities (or the given ones).

    ``drift_abort`` (eV/atom/ps) stops the run once the running drift
    estimate over at least 20 records exceeds it; None disables the check.
    """
    if n_steps < 0 or record_every < 1:
        raise ValidationError("n_steps must be >= 0 and record_every >= 1")
    v = maxwell_boltzmann_init(structure, T, seed) if velocities is None else np.array(velocities, dtype=np.float64)
    energy, forces = potential(structure)
    state = _state(structure, v, energy, forces, 0.0, masses_of(structure))
    traj = [state]
    n = len(structure)
    for step in range(1, n_steps + 1):
        state = nve_step(state, potential, dt)
        if step % record_every == 0 or step == n_steps:
            traj.append(state)
            if callback is not None:
                callback(state)
            if drift_abort is not None and len(traj) >= 20:
                slope = drift_slope([s.time for s in traj], [s.total for s in traj], n)
                if abs(slope) > drift_abort:
                    msg = f"energy drift {slope:.3g} eV/atom/ps exceeds {drift_abort:g} at t = {state.time:g} fs"
                    log.warning(msg)
                    return MDResult(traj, slope, True, msg, step)
    slope = drift_slope([s.time for s in traj], [s.total for s in traj], n)
    return MDResult(traj, slope, False, "", n_steps)


@dataclass
class RelaxResult:
    structure: Structure
    steps: int
    fmax: float  # largest per-atom force norm at ``structure``
    converged: bool
    energies: list[float] = field(default_factory=list)


def _max_force(forces: np.ndarray) -> float:
    return float(np.sqrt((forces**2).sum(axis=1)).max()) if len(forces) else 0.0


def fire_relax(
    structure: Structure,
    potential: Potential,
    fmax: float = 0.05,
    max_steps: int = 500,
    *,
    dt0: float = 0.1,
    dt_max: float = 1.0,
    alpha0: float = 0.1,
    f_inc: float = 1.1,
    f_dec: float = 0.5,
    f_alpha: float = 0.99,
    n_min: int = 5,
    max_move: float = 0.2,
) -> RelaxResult:
    """Relax atomic positions (cell fixed) until every |F_i| <= ``fmax``."""
    if fmax <= 0:
        raise ValidationError("fmax must be positive")
    m = masses_of(structure)[:, None] * MV2_TO_EV
    s = structure
    energy, forces = potential(s)
    energies = [float(energy)]
    v = np.zeros_like(s.positions)
    dt, alpha, n_pos = dt0, alpha0, 0
    for step in range(max_steps + 1):
        fm = _max_force(forces)
        if fm <= fmax:
            return RelaxResult(s, step, fm, True, energies)
        if step == max_steps:
            break
        power = float(np.sum(forces * v))
        if power > 0:
            fnorm = np.linalg.norm(forces)
            v = (1.0 - alpha) * v + alpha * np.linalg.norm(v) * forces / fnorm
            n_pos += 1
            if n_pos > n_min:
                dt = min(dt * f_inc, dt_max)
                alpha *= f_alpha
        else:
            v[:] = 0.0
            dt *= f_dec
            alpha = alpha0
            n_pos = 0
        v = v + dt * forces / m
        dx = dt * v
        longest = float(np.sqrt((dx**2).sum(axis=1)).max())
        if longest > max_move:
            dx *= max_move / longest
        s = _moved(s, s.positions + dx)
        energy, forces = potential(s)
        if not (np.isfinite(energy) and np.all(np.isfinite(forces))):
            raise NumericalError(f"non-finite energy or forces at relaxation step {step + 1}")
        energies.append(float(energy))
    return RelaxResult(s, max_steps, _max_force(forces), False, energies)
