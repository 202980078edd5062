"""Synthetic objectives, their search bounds, and the affine map between
native bounds and the normalized cube the models operate in.

Scores are negated function values so the optimizer always maximizes; the
global optimum of every task therefore scores 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# textbook constants: Ackley a=20 b=0.2 c=2*pi, Rastrigin A=10,
# Levy w_i = 1 + (x_i - 1)/4


def _rastrigin(x):
    return 10.0 * x.shape[-1] + np.sum(x * x - 10.0 * np.cos(2 * np.pi * x), axis=-1)


def _ackley(x):
    d = x.shape[-1]
    s1 = np.sqrt(np.sum(x * x, axis=-1) / d)
    s2 = np.sum(np.cos(2 * np.pi * x), axis=-1) / d
    return -20.0 * np.exp(-0.2 * s1) - np.exp(s2) + 20.0 + np.e


def _levy(x):
    w = 1.0 + (x - 1.0) / 4.0
    head = np.sin(np.pi * w[..., 0]) ** 2
    mid = np.sum(
        (w[..., :-1] - 1.0) ** 2 * (1.0 + 10.0 * np.sin(np.pi * w[..., :-1] + 1.0) ** 2),
        axis=-1,
    )
    tail = (w[..., -1] - 1.0) ** 2 * (1.0 + np.sin(2 * np.pi * w[..., -1]) ** 2)
    return head + mid + tail


def _rosenbrock(x):
    return np.sum(
        100.0 * (x[..., 1:] - x[..., :-1] ** 2) ** 2 + (1.0 - x[..., :-1]) ** 2, axis=-1
    )


# name -> (function, lower bound, upper bound)
TASKS = {
    "rastrigin": (_rastrigin, -5.0, 5.0),
    "ackley": (_ackley, -5.0, 10.0),
    "levy": (_levy, -10.0, 10.0),
    "rosenbrock": (_rosenbrock, -5.0, 10.0),
}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    dim: int
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not np.all(self.lb < self.ub):
            raise ValueError("require lb < ub per dimension")


def make_task(name: str, dim: int) -> TaskSpec:
    if name not in TASKS:
        raise KeyError(f"unknown task {name!r}; available: {sorted(TASKS)}")
    _, lb, ub = TASKS[name]
    return TaskSpec(name, dim, np.full(dim, lb), np.full(dim, ub))


@dataclass
class Objective:
    """Callable wrapper around a task; counts every evaluation."""

    spec: TaskSpec
    eval_count: int = 0
    clip_events: int = 0
    _fn: callable = field(init=False, repr=False)

    def __post_init__(self):
        self._fn = TASKS[self.spec.name][0]

    def evaluate(self, x_native: np.ndarray) -> float:
        x = np.asarray(x_native, dtype=float)
        if x.shape != (self.spec.dim,):
            raise ValueError(f"expected shape ({self.spec.dim},), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("NaN/inf query point")
        if np.any(x < self.spec.lb) or np.any(x > self.spec.ub):
            self.clip_events += 1
            log.warning("query outside bounds clipped (task=%s)", self.spec.name)
            x = np.clip(x, self.spec.lb, self.spec.ub)
        self.eval_count += 1
        return float(-self._fn(x))

    def evaluate_batch(self, X: np.ndarray) -> np.ndarray:
        return np.array([self.evaluate(row) for row in np.asarray(X, dtype=float)])


def to_unit(spec: TaskSpec, x_native):
    """Affine map from [lb, ub] to [-1, 1]."""
    return 2.0 * (np.asarray(x_native, dtype=float) - spec.lb) / (spec.ub - spec.lb) - 1.0


def from_unit(spec: TaskSpec, x_norm):
    """Inverse of :func:`to_unit`."""
    return spec.lb + (np.asarray(x_norm, dtype=float) + 1.0) * 0.5 * (spec.ub - spec.lb)


def uniform_init(spec: TaskSpec, n: int, seed) -> np.ndarray:
    """n uniform points inside the box; deterministic per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.uniform(spec.lb, spec.ub, size=(n, spec.dim))
