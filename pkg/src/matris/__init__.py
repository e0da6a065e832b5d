"""Invariant line-graph attention interatomic potential.

Subpackages: :mod:`matris.structio` (structures and datasets),
:mod:`matris.graphgen` (radius and line graphs), :mod:`matris.autodiff`
(reverse-mode differentiation), :mod:`matris.model` (the network),
:mod:`matris.training`, :mod:`matris.simulate` (FIRE and NVE) and
:mod:`matris.cli`.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import MatrisError, NumericalError, OverlappingAtomsError, ParseError, ValidationError
from .structio import Structure, parse_dataset, write_dataset

__all__ = [
    "__version__",
    "MatrisError",
    "ValidationError",
    "ParseError",
    "OverlappingAtomsError",
    "NumericalError",
    "Structure",
    "parse_dataset",
    "write_dataset",
]
