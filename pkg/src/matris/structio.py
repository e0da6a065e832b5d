"""Structures, extended-XYZ datasets, reference energies and dataset splits.

Units: positions and lattice in Å, energy in eV, forces in eV/Å, stress in
eV/Å³ with the convention ``stress = (1/V) dE/d(strain)``, magmoms in μB.
"""

from __future__ import annotations

import math
import shlex
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .elements import MAX_Z, atomic_number, symbol
from .errors import ParseError, ValidationError

__all__ = [
    "Structure",
    "RefEnergies",
    "parse_dataset",
    "parse_text",
    "write_dataset",
    "format_dataset",
    "fit_reference_energies",
    "split_dataset",
]


@dataclass
class Structure:
    """Atomic configuration with optional labels.

    ``lattice`` rows are the cell vectors. Missing labels are ``None``; they
    are never zero-filled.
    """

    numbers: np.ndarray
    positions: np.ndarray
    lattice: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    pbc: tuple[bool, bool, bool] = (False, False, False)
    energy: float | None = None
    forces: np.ndarray | None = None
    stress: np.ndarray | None = None
    magmoms: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.numbers = np.asarray(self.numbers, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.lattice = np.asarray(self.lattice, dtype=np.float64).reshape(3, 3)
        self.pbc = tuple(bool(p) for p in np.broadcast_to(np.asarray(self.pbc), (3,)))
        if self.energy is not None:
            self.energy = float(self.energy)
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
        if self.stress is not None:
            self.stress = np.asarray(self.stress, dtype=np.float64)
        if self.magmoms is not None:
            self.magmoms = np.asarray(self.magmoms, dtype=np.float64).reshape(-1)
        self.validate()

    def __len__(self) -> int:
        return len(self.numbers)

    @property
    def n_atoms(self) -> int:
        return len(self.numbers)

    @property
    def periodic(self) -> bool:
        return any(self.pbc)

    @property
    def volume(self) -> float:
        return abs(float(np.linalg.det(self.lattice)))

    def validate(self) -> None:
        n = len(self.numbers)
        if self.positions.shape != (n, 3):
            raise ValidationError(f"positions shape {self.positions.shape} != ({n}, 3)")
        if n and (self.numbers.min() < 1 or self.numbers.max() > MAX_Z):
            raise ValidationError(f"atomic numbers must lie in 1..{MAX_Z}")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("non-finite positions")
        if self.periodic and np.linalg.det(self.lattice) <= 0.0:
            raise ValidationError(
                f"lattice determinant {np.linalg.det(self.lattice):.6g} must be positive with pbc"
            )
        if self.forces is not None and self.forces.shape != (n, 3):
            raise ValidationError(f"forces shape {self.forces.shape} != ({n}, 3)")
        if self.magmoms is not None and self.magmoms.shape != (n,):
            raise ValidationError(f"magmoms length {self.magmoms.shape[0]} != {n}")
        if self.stress is not None:
            if self.stress.shape != (3, 3):
                raise ValidationError(f"stress shape {self.stress.shape} != (3, 3)")
            if np.max(np.abs(self.stress - self.stress.T)) > 1e-12:
                raise ValidationError("stress must be symmetric")

    def copy(self, **changes) -> Structure:
        """Deep copy, optionally replacing fields."""
        base = replace(
            self,
            numbers=self.numbers.copy(),
            positions=self.positions.copy(),
            lattice=self.lattice.copy(),
            forces=None if self.forces is None else self.forces.copy(),
            stress=None if self.stress is None else self.stress.copy(),
            magmoms=None if self.magmoms is None else self.magmoms.copy(),
            info=dict(self.info),
        )
        return replace(base, **changes) if changes else base

    def without_labels(self) -> Structure:
        return Structure(self.numbers.copy(), self.positions.copy(), self.lattice.copy(), self.pbc)


# ----------------------------------------------------------------------------
# extended XYZ
# ----------------------------------------------------------------------------

_FLOAT = "{:.17g}"


def _fmt(values) -> str:
    return " ".join(_FLOAT.format(float(v)) for v in np.ravel(values))


def _format_frame(s: Structure) -> str:
    cols = ["species:S:1", "pos:R:3"]
    if s.forces is not None:
        cols.append("forces:R:3")
    if s.magmoms is not None:
        cols.append("magmoms:R:1")
    header = [f'Lattice="{_fmt(s.lattice)}"', f"Properties={':'.join(cols)}"]
    if s.energy is not None:
        header.append(f"energy={_FLOAT.format(s.energy)}")
    if s.stress is not None:
        header.append(f'stress="{_fmt(s.stress)}"')
    header.append('pbc="{}"'.format(" ".join("T" if p else "F" for p in s.pbc)))
    for key, value in s.info.items():
        header.append(f"{key}={shlex.quote(str(value))}")
    lines = [str(len(s)), " ".join(header)]
    for k in range(len(s)):
        row = [symbol(int(s.numbers[k])), _fmt(s.positions[k])]
        if s.forces is not None:
            row.append(_fmt(s.forces[k]))
        if s.magmoms is not None:
            row.append(_FLOAT.format(s.magmoms[k]))
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def format_dataset(structures) -> str:
    return "".join(_format_frame(s) for s in structures)


def write_dataset(path, structures) -> None:
    """Write structures as extended XYZ (17 significant digits, lossless)."""
    Path(path).write_text(format_dataset(structures))


def _parse_properties(spec: str, frame: int, line: int) -> list[tuple[str, int]]:
    parts = spec.split(":")
    if len(parts) % 3:
        raise ParseError(f"bad Properties spec {spec!r}", frame, line)
    out = []
    for k in range(0, len(parts), 3):
        name, kind, count = parts[k], parts[k + 1], parts[k + 2]
        if kind not in "SRIL" or not count.isdigit():
            raise ParseError(f"bad Properties entry {name}:{kind}:{count}", frame, line)
        out.append((name, int(count)))
    return out


def _floats(text: str, n: int, what: str, frame: int, line: int) -> np.ndarray:
    try:
        vals = np.array([float(t) for t in text.split()])
    except ValueError:
        raise ParseError(f"non-numeric {what}", frame, line) from None
    if vals.size != n:
        raise ParseError(f"{what} needs {n} values, got {vals.size}", frame, line)
    return vals


def parse_text(text: str) -> list[Structure]:
    """Parse extended-XYZ text into structures, in file order."""
    lines = text.splitlines()
    out: list[Structure] = []
    pos = 0
    frame = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        count_line = pos + 1
        try:
            n = int(lines[pos].strip())
        except ValueError:
            raise ParseError(f"expected atom count, got {lines[pos]!r}", frame, count_line) from None
        if n < 0:
            raise ParseError("negative atom count", frame, count_line)
        if pos + 1 >= len(lines):
            raise ParseError("missing comment line", frame, count_line + 1)
        comment_line = pos + 2
        try:
            tokens = shlex.split(lines[pos + 1])
        except ValueError as exc:
            raise ParseError(f"unbalanced quotes ({exc})", frame, comment_line) from None
        kv = {}
        for tok in tokens:
            if "=" not in tok:
                raise ParseError(f"expected key=value, got {tok!r}", frame, comment_line)
            key, value = tok.split("=", 1)
            kv[key] = value
        if "Lattice" not in kv:
            raise ParseError("missing Lattice", frame, comment_line)
        lattice = _floats(kv.pop("Lattice"), 9, "Lattice", frame, comment_line).reshape(3, 3)
        props = _parse_properties(kv.pop("Properties", "species:S:1:pos:R:3"), frame, comment_line)
        names = [p[0] for p in props]
        if names[:2] != ["species", "pos"]:
            raise ParseError("Properties must start with species:S:1:pos:R:3", frame, comment_line)
        pbc_txt = kv.pop("pbc", "T T T").split()
        if len(pbc_txt) != 3 or any(t not in ("T", "F") for t in pbc_txt):
            raise ParseError(f"bad pbc {pbc_txt!r}", frame, comment_line)
        pbc = tuple(t == "T" for t in pbc_txt)
        energy = None
        if "energy" in kv:
            energy = float(_floats(kv.pop("energy"), 1, "energy", frame, comment_line)[0])
        stress = None
        if "stress" in kv:
            stress = _floats(kv.pop("stress"), 9, "stress", frame, comment_line).reshape(3, 3)
        width = sum(c for _, c in props)
        if pos + 2 + n > len(lines):
            raise ParseError(f"expected {n} atom rows, file ends early", frame, len(lines) + 1)
        columns: dict[str, list] = {name: [] for name in names}
        for k in range(n):
            lno = pos + 3 + k
            row = lines[pos + 2 + k].split()
            if len(row) != width:
                raise ParseError(f"atom row has {len(row)} columns, expected {width}", frame, lno)
            col = 0
            for name, count in props:
                chunk = row[col : col + count]
                col += count
                if name == "species":
                    try:
                        columns[name].append(atomic_number(chunk[0]))
                    except KeyError as exc:
                        raise ParseError(str(exc), frame, lno) from None
                else:
                    try:
                        columns[name].append([float(t) for t in chunk])
                    except ValueError:
                        raise ParseError(f"non-numeric {name}", frame, lno) from None
        forces = np.array(columns["forces"]).reshape(n, 3) if "forces" in columns else None
        magmoms = np.array(columns["magmoms"]).reshape(n) if "magmoms" in columns else None
        try:
            s = Structure(
                numbers=np.array(columns["species"], dtype=np.int64),
                positions=np.array(columns["pos"], dtype=np.float64).reshape(n, 3),
                lattice=lattice,
                pbc=pbc,
                energy=energy,
                forces=forces,
                stress=stress,
                magmoms=magmoms,
                info=kv,
            )
        except ValidationError as exc:
            raise ParseError(str(exc), frame, comment_line) from None
        out.append(s)
        pos += 2 + n
        frame += 1
    return out


def parse_dataset(path, format: str = "extxyz") -> list[Structure]:  # noqa: A002
    if format != "extxyz":
        raise ValidationError(f"unsupported dataset format {format!r}")
    return parse_text(Path(path).read_text())


# ----------------------------------------------------------------------------
# reference energies
# ----------------------------------------------------------------------------


@dataclass
class RefEnergies:
    """Per-element energy offsets (eV), indexed by atomic number."""

    offsets: np.ndarray
    fit_residual: float = 0.0

    def __post_init__(self) -> None:
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.offsets.shape != (MAX_Z + 1,):
            raise ValidationError(f"offsets must have length {MAX_Z + 1}")

    @classmethod
    def zeros(cls) -> RefEnergies:
        return cls(np.zeros(MAX_Z + 1))

    def total(self, numbers) -> float:
        return float(self.offsets[np.asarray(numbers)].sum())

    def subtract(self, structures) -> list[Structure]:
        """Copies of labeled structures with reference energies removed."""
        return [s.copy(energy=s.energy - self.total(s.numbers)) for s in structures]


def composition_matrix(structures) -> np.ndarray:
    """Element counts, shape (n_structures, MAX_Z + 1)."""
    C = np.zeros((len(structures), MAX_Z + 1))
    for k, s in enumerate(structures):
        C[k] = np.bincount(s.numbers, minlength=MAX_Z + 1)
    return C


def fit_reference_energies(dataset, ridge: float = 1e-8) -> RefEnergies:
    """Ridge least squares of total energies on element counts.

    Minimises ``sum_s (E_s - sum_i ref(z_i))^2 + ridge * |ref|^2``. Elements
    absent from the dataset get offset 0.
    """
    if ridge < 0:
        raise ValidationError("ridge must be >= 0")
    labeled = [s for s in dataset if s.energy is not None]
    if not labeled:
        raise ValidationError("no structures with an energy label")
    if len(labeled) != len(dataset):
        raise ValidationError("every structure needs an energy label")
    C = composition_matrix(labeled)
    E = np.array([s.energy for s in labeled])
    present = np.flatnonzero(C.sum(axis=0) > 0)
    A = C[:, present]
    normal = A.T @ A
    if ridge == 0.0 and np.linalg.matrix_rank(A) < len(present):
        raise ValidationError(
            "composition matrix is rank deficient; use a nonzero ridge (e.g. 1e-8)"
        )
    coef = np.linalg.solve(normal + ridge * np.eye(len(present)), A.T @ E)
    offsets = np.zeros(MAX_Z + 1)
    offsets[present] = coef
    natoms = C.sum(axis=1)
    residual = float(np.sqrt(np.mean(((E - A @ coef) / natoms) ** 2)))
    return RefEnergies(offsets, residual)


# ----------------------------------------------------------------------------
# splitting
# ----------------------------------------------------------------------------


def split_dataset(dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle and split into (train, val, test).

    Train and val counts are floored; the remainder goes to test.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValidationError("fractions must be three nonnegative numbers")
    if abs(math.fsum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions sum to {math.fsum(fractions)}, expected 1")
    n = len(dataset)
    nonzero = sum(f > 0 for f in fractions)
    if n < nonzero:
        raise ValidationError(f"{n} structures cannot fill {nonzero} nonempty splits")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple([dataset[k] for k in part] for part in parts)
