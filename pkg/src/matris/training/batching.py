"""Epoch schedules that split samples over workers under an atom budget.

A schedule is a list of steps; each step holds one list of sample indices
per worker.
"""

from __future__ import annotations

import time
from collections.abc import Callable

import numpy as np

from ..errors import ValidationError


def _check(sizes, n_workers, capacity):
    sizes = np.asarray(sizes, dtype=np.int64)
    if n_workers < 1:
        raise ValidationError("n_workers must be >= 1")
    if sizes.size and sizes.max() > capacity:
        k = int(sizes.argmax())
        raise ValidationError(f"sample {k} has size {int(sizes[k])} > capacity {capacity}")
    if sizes.size and sizes.min() < 0:
        raise ValidationError("sizes must be >= 0")
    return sizes


def assign_chunk(sizes, order, n_workers: int, capacity: int) -> list[list[list[int]]]:
    """Greedy assignment of one chunk.

    Samples go in descending size to the worker with the most remaining
    capacity (lowest index on ties). When the next sample fits nowhere the
    current step is emitted and a new one started; the chunk's last step is
    emitted even if not full.
    """
    order = sorted(order, key=lambda i: (-int(sizes[i]), i))
    steps = []
    shards = [[] for _ in range(n_workers)]
    free = np.full(n_workers, capacity, dtype=np.int64)
    for i in order:
        w = int(np.argmax(free))
        if sizes[i] > free[w]:
            steps.append(shards)
            shards = [[] for _ in range(n_workers)]
            free[:] = capacity
            w = 0
        shards[w].append(int(i))
        free[w] -= sizes[i]
    if any(shards):
        steps.append(shards)
    return steps


def load_balanced_batches(sizes, n_workers: int, capacity: int, seed: int = 0, chunk: int | None = None):
    """Shuffle, cut into chunks of ``16 n_workers`` samples, assign each greedily."""
    sizes = _check(sizes, n_workers, capacity)
    chunk = 16 * n_workers if chunk is None else int(chunk)
    if chunk < 1:
        raise ValidationError("chunk must be >= 1")
    order = np.random.default_rng(seed).permutation(len(sizes))
    steps = []
    for start in range(0, len(order), chunk):
        steps.extend(assign_chunk(sizes, order[start : start + chunk], n_workers, capacity))
    return steps


def round_robin_batches(sizes, n_workers: int, per_worker: int, seed: int = 0):
    """Baseline: fixed number of shuffled samples per worker, dealt in turn."""
    if per_worker < 1:
        raise ValidationError("per_worker must be >= 1")
    sizes = _check(sizes, n_workers, np.inf)
    order = np.random.default_rng(seed).permutation(len(sizes))
    step_size = n_workers * per_worker
    steps = []
    for start in range(0, len(order), step_size):
        block = order[start : start + step_size]
        steps.append([[int(i) for i in block[w::n_workers]] for w in range(n_workers)])
    return steps


def worker_loads(steps, sizes) -> np.ndarray:
    """Atom totals, shape (n_steps, n_workers)."""
    sizes = np.asarray(sizes)
    return np.array([[int(sizes[s].sum()) if s else 0 for s in step] for step in steps])


def imbalance_ratio(steps, sizes) -> float:
    """Mean over steps of max/min worker load (inf if some worker idles)."""
    loads = worker_loads(steps, sizes).astype(np.float64)
    if loads.size == 0:
        return 1.0
    lo = loads.min(axis=1)
    with np.errstate(divide="ignore"):
        r = np.where(lo > 0, loads.max(axis=1) / np.where(lo > 0, lo, 1.0), np.inf)
    return float(r.mean())


def validate_schedule(steps, sizes, capacity: int | None = None) -> None:
    """Every sample exactly once; no worker over capacity."""
    seen = sorted(i for step in steps for shard in step for i in shard)
    if seen != list(range(len(sizes))):
        raise ValidationError("schedule does not cover every sample exactly once")
    if capacity is not None and worker_loads(steps, sizes).max(initial=0) > capacity:
        raise ValidationError("a worker exceeds its capacity")


def timed_epoch(steps, work: Callable[[list[int]], object]) -> tuple[float, np.ndarray]:
    """Run ``work(shard)`` for every shard, one after another.

    Workers of a step would run concurrently and meet at a barrier, so the
    simulated wall time of a step is its slowest shard. Returns
    ``(wall_time, per-shard times of shape (n_steps, n_workers))``.
    """
    times = np.zeros((len(steps), max((len(s) for s in steps), default=0)))
    for k, step in enumerate(steps):
        for w, shard in enumerate(step):
            t0 = time.perf_counter()
            if shard:
                work(shard)
            times[k, w] = time.perf_counter() - t0
    return float(times.max(axis=1).sum()) if len(times) else 0.0, times
