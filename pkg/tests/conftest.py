from __future__ import annotations

import numpy as np
import pytest

from matris.model import ModelConfig
from matris.structio import Structure

# small but complete configuration for fast property tests
SMALL = ModelConfig(n_layers=2, d_atom=8, d_edge=8, d_angle=8, n_bessel=5, m_max=4,
                    r_cut_a=3.0, r_cut_l=2.5, max_z=10)


def random_structure(rng, n=None, periodic=None, min_dist=0.9, zs=(1, 6, 8)):
    """Random cluster or triclinic cell with no pair closer than ``min_dist``."""
    if periodic is None:
        periodic = bool(rng.integers(2))
    n = int(rng.integers(2, 8)) if n is None else n
    if periodic:
        L = np.diag(rng.uniform(3.2, 4.5, 3)) + rng.uniform(-0.4, 0.4, (3, 3)) * (1 - np.eye(3))
    else:
        L = np.eye(3) * 3.0
    for _ in range(1000):
        frac = rng.random((n, 3))
        X = frac @ L
        if periodic:
            d = frac[:, None] - frac[None]
            d -= np.round(d)
            dist = np.linalg.norm(d @ L, axis=-1)
        else:
            dist = np.linalg.norm(X[:, None] - X[None], axis=-1)
        dist[np.diag_indices(n)] = np.inf
        if dist.min() > min_dist:
            break
    numbers = rng.choice(zs, n)
    if periodic:
        return Structure(numbers, X, L, (True, True, True))
    return Structure(numbers, X)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return SMALL


# one summary line per acceptance criterion, printed after the test report
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_acceptance(name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
    print(f"ACCEPTANCE {name}: {'PASS' if passed else 'FAIL'} ({detail})")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
