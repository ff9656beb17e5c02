"""Adam and the constant-then-cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamState", "LrSchedule", "NonFiniteGradientError", "adam_step", "lr_at"]


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, message, seed=None, iteration=None):
        super().__init__(f"{message} (seed={seed}, iteration={iteration})")
        self.seed = seed
        self.iteration = iteration


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    total_iters: int = 1500
    constant_fraction: float = 0.5
    final_lr: float = 0.0

    def __post_init__(self):
        if not 0 < self.constant_fraction < 1:
            raise ValueError(f"constant_fraction must lie in (0, 1), got {self.constant_fraction}")


def lr_at(iteration: int, sched: LrSchedule) -> float:
    """Flat at ``base_lr`` for the first part of the run, then cosine toward ``final_lr``.

    The cosine phase is t = (iteration - start) / (total - start), so the last
    iteration sits a hair above ``final_lr``.
    """
    if not 0 <= iteration < sched.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {sched.total_iters})")
    start = sched.constant_fraction * sched.total_iters
    if iteration < start:
        return sched.base_lr
    t = (iteration - start) / (sched.total_iters - start)
    return sched.final_lr + (sched.base_lr - sched.final_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    seed=None,
    iteration=None,
) -> None:
    """Bias-corrected Adam, updating ``params`` in place.

    Moments are keyed by parameter name; names missing from ``params`` keep
    their moments untouched.
    """
    if lr < 0:
        raise ValueError(f"negative learning rate {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}", seed, iteration)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if lr:
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
