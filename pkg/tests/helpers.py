"""Shared test utilities: finite-difference oracle and small fixture builders."""

from __future__ import annotations

import numpy as np

from dipper.core import GoalState, HighTrajectory, PreferenceLabel, Subgoal, TrajectoryPair
from dipper.nets import ParamTensor


def finite_diff(fn, flat: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        hi = flat.copy()
        hi[i] += h
        lo = flat.copy()
        lo[i] -= h
        grad[i] = (fn(hi) - fn(lo)) / (2.0 * h)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Worst-case elementwise error, relative for large values, absolute near zero."""
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def with_flat(params: ParamTensor, flat: np.ndarray) -> ParamTensor:
    return ParamTensor(params.spec, flat.copy())


def open_state(pos, width=4, height=4, goal=(3, 3)) -> GoalState:
    """GoalState on an all-open maze (test fixtures need no walls)."""
    return GoalState(tuple(pos), np.zeros(width * height, dtype=np.uint8),
                     width, height, tuple(goal))


def random_trajectory(rng: np.random.Generator, length: int, width=4, height=4,
                      goal=(3, 3)) -> HighTrajectory:
    steps = tuple(
        (open_state((int(rng.integers(width)), int(rng.integers(height))), width, height, goal),
         Subgoal((int(rng.integers(width)), int(rng.integers(height)))))
        for _ in range(length))
    final = open_state((int(rng.integers(width)), int(rng.integers(height))),
                       width, height, goal)
    return HighTrajectory(steps, final)


def random_pair(rng: np.random.Generator, length: int, width=4, height=4,
                hard_only=True) -> TrajectoryPair:
    y = (1.0, 0.0) if rng.random() < 0.5 else (0.0, 1.0)
    if not hard_only and rng.random() < 0.25:
        y = (0.5, 0.5)
    return TrajectoryPair(random_trajectory(rng, length, width, height),
                          random_trajectory(rng, length, width, height),
                          PreferenceLabel(y))
