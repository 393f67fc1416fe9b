"""Synthetic preference feedback over trajectories.

Two scorers ship: `sparse_final_reward` counts visits inside the goal radius
(the faithful sparse signal) and `negative_goal_distance` returns minus the
closest approach to the goal (a denser signal that labels partial progress).
Labels are either deterministic (prefer the higher score, tie inside
tie_tolerance) or sampled from the Bradley-Terry choice probability
sigmoid(score difference).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (LABEL_FIRST, LABEL_SECOND, LABEL_TIE, Cell, FlatTrajectory, GoalState,
                   HighTrajectory, PreferenceLabel, ReplayBuffer, Subgoal, TrajectoryPair,
                   sq_dist)
from .nets import sigmoid


@dataclass(frozen=True)
class OracleSpec:
    mode: str = "bradley_terry"  # or "deterministic"
    scoring: str = "negative_goal_distance"  # or "sparse_final_reward"
    tie_tolerance: float = 1e-9

    def __post_init__(self) -> None:
        if self.tie_tolerance < 0:
            raise ValueError("tie_tolerance must be non-negative")


def score_trajectory(tau: HighTrajectory | FlatTrajectory, goal: Cell,
                     spec: OracleSpec, delta: float = 1.5) -> float:
    """Scalar quality of a trajectory with respect to the final goal."""
    positions = tau.visited_positions()
    if not positions:
        raise ValueError("cannot score an empty trajectory")
    if spec.scoring == "sparse_final_reward":
        return float(sum(1 for p in positions if sq_dist(p, goal) < delta * delta))
    return -min(math.sqrt(sq_dist(p, goal)) for p in positions)


def label_pair(tau1, tau2, spec: OracleSpec, rng: np.random.Generator,
               delta: float = 1.5) -> PreferenceLabel:
    """Label a pair of trajectories that share a final goal."""
    if tau1.final_goal != tau2.final_goal:
        raise ValueError("paired trajectories must share the final goal")
    s1 = score_trajectory(tau1, tau1.final_goal, spec, delta)
    s2 = score_trajectory(tau2, tau2.final_goal, spec, delta)
    if spec.mode == "deterministic":
        if abs(s1 - s2) <= spec.tie_tolerance:
            return PreferenceLabel(LABEL_TIE)
        return PreferenceLabel(LABEL_FIRST if s1 > s2 else LABEL_SECOND)
    p_first = sigmoid(s1 - s2)
    return PreferenceLabel(LABEL_FIRST if rng.random() < p_first else LABEL_SECOND)


def relabel_dataset(dataset: ReplayBuffer, spec: OracleSpec, rng: np.random.Generator,
                    delta: float = 1.5) -> None:
    """Refresh every stored label in place.

    Scores are trajectory-intrinsic, so deterministic mode is idempotent;
    Bradley-Terry mode redraws the label noise.
    """
    for pair in dataset.items():
        pair.label = label_pair(pair.tau1, pair.tau2, spec, rng, delta)


def _encode_trajectory(tau: HighTrajectory) -> dict:
    ref = tau.final_state
    return {
        "width": ref.width,
        "height": ref.height,
        "maze": ref.maze.tolist(),
        "goal": list(ref.final_goal),
        "steps": [[s.position[0], s.position[1], g.cell[0], g.cell[1]] for s, g in tau.steps],
        "final": list(ref.position),
    }


def _decode_trajectory(obj: dict) -> HighTrajectory:
    maze = np.asarray(obj["maze"], dtype=np.uint8)
    width, height = obj["width"], obj["height"]
    goal = (obj["goal"][0], obj["goal"][1])

    def state(x: int, y: int) -> GoalState:
        return GoalState((x, y), maze, width, height, goal)

    steps = tuple((state(px, py), Subgoal((gx, gy))) for px, py, gx, gy in obj["steps"])
    return HighTrajectory(steps, state(obj["final"][0], obj["final"][1]))


def dump_pairs(pairs, path: str | Path) -> None:
    """Write subgoal-trajectory pairs as line-delimited JSON records."""
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            record = {
                "tau1": _encode_trajectory(pair.tau1),
                "tau2": _encode_trajectory(pair.tau2),
                "y": list(pair.label.y),
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_pairs(path: str | Path) -> list[TrajectoryPair]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            out.append(TrajectoryPair(
                _decode_trajectory(obj["tau1"]),
                _decode_trajectory(obj["tau2"]),
                PreferenceLabel((obj["y"][0], obj["y"][1])),
            ))
    return out
