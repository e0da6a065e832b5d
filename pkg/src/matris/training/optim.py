"""AdamW with decoupled weight decay, global-norm clipping and a cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError, ValidationError


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """``lr_min + (lr_max - lr_min)(1 + cos(pi step / total)) / 2``; lr_max if total is 0."""
    if total_steps < 0 or not 0 <= step <= max(total_steps, 0):
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return float(lr_max)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def global_norm(grads) -> float:
    return math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))


def clip_grad_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericalError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads: dict, state: AdamWState, lr: float, wd: float, *,
               betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = None) -> float:
    """Update ``params[name]`` in place for every name in ``grads``.

    Returns the pre-clip gradient norm. A non-finite gradient raises before
    anything is modified.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}; step refused")
    if clip_norm is not None:
        grads, norm = clip_grad_norm(grads, clip_norm)
    else:
        norm = global_norm(grads)
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p = params[k]
        params[k] = p - lr * wd * p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return norm
