"""Procedurally generated four-room gridworld with sparse goal rewards.

One vertical wall (column wall_col) and one horizontal wall (row wall_row)
split the grid into four rooms. Each of the four wall segments gets at most
one gate, drawn uniformly from the cells strictly inside the segment; a
segment too short to hold a gate simply stays closed, and rejection sampling
on start-to-goal reachability filters out unsolvable layouts.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import Cell, GoalState, cell_index, sq_dist

# up, down, left, right, stay; y grows downward (row 0 renders on top)
ACTION_NAMES = ("up", "down", "left", "right", "stay")
ACTION_DELTAS = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))
N_ACTIONS = len(ACTION_DELTAS)

GENERATION_ATTEMPTS = 100


class MazeGenerationError(RuntimeError):
    """No reachable layout found within the attempt budget."""


class EpisodeDoneError(RuntimeError):
    """step() called after the episode already ended."""


@dataclass(frozen=True)
class MazeSpec:
    """Four-room layout: wall positions, gates, start, and goal."""

    width: int
    height: int
    wall_col: int
    wall_row: int
    # (row of gate in upper vertical segment, row in lower vertical segment,
    #  column of gate in left horizontal segment, column in right horizontal segment)
    gates: tuple[int | None, int | None, int | None, int | None]
    start: Cell
    goal: Cell

    def occupancy(self) -> np.ndarray:
        """Flat uint8 wall mask of length width*height (1 = wall)."""
        occ = np.zeros(self.width * self.height, dtype=np.uint8)
        for y in range(self.height):
            occ[y * self.width + self.wall_col] = 1
        for x in range(self.width):
            occ[self.wall_row * self.width + x] = 1
        v_top, v_bottom, h_left, h_right = self.gates
        if v_top is not None:
            occ[v_top * self.width + self.wall_col] = 0
        if v_bottom is not None:
            occ[v_bottom * self.width + self.wall_col] = 0
        if h_left is not None:
            occ[self.wall_row * self.width + h_left] = 0
        if h_right is not None:
            occ[self.wall_row * self.width + h_right] = 0
        return occ

    def render(self) -> str:
        """Text grid: '#' wall, '.' open, 'S' start, 'G' goal."""
        occ = self.occupancy()
        rows = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                if (x, y) == self.start:
                    row.append("S")
                elif (x, y) == self.goal:
                    row.append("G")
                else:
                    row.append("#" if occ[y * self.width + x] else ".")
            rows.append("".join(row))
        return "\n".join(rows)


@dataclass(frozen=True)
class CorridorSpec:
    """Wall-free room with start and goal on opposite columns.

    Duck-typed drop-in for MazeSpec wherever an environment layout is needed;
    useful as an easy curriculum or smoke-test variant.
    """

    width: int
    height: int
    start: Cell
    goal: Cell

    def occupancy(self) -> np.ndarray:
        return np.zeros(self.width * self.height, dtype=np.uint8)

    def render(self) -> str:
        rows = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                if (x, y) == self.start:
                    row.append("S")
                elif (x, y) == self.goal:
                    row.append("G")
                else:
                    row.append(".")
            rows.append("".join(row))
        return "\n".join(rows)


def generate_corridor(rng: np.random.Generator, width: int, height: int) -> CorridorSpec:
    if width < 5 or height < 5:
        raise ValueError("corridor needs width >= 5 and height >= 5")
    start = (0, int(rng.integers(height)))
    goal = (width - 1, int(rng.integers(height)))
    return CorridorSpec(width, height, start, goal)


def reachable_cells(occ: np.ndarray, width: int, height: int, start: Cell) -> np.ndarray:
    """Flat boolean mask of cells connected to start by 4-neighbor moves."""
    seen = np.zeros(width * height, dtype=bool)
    if occ[cell_index(start, width)]:
        return seen
    seen[cell_index(start, width)] = True
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in ((0, -1), (0, 1), (-1, 0), (1, 0)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < width and 0 <= ny < height:
                i = ny * width + nx
                if not occ[i] and not seen[i]:
                    seen[i] = True
                    queue.append((nx, ny))
    return seen


def _gate(rng: np.random.Generator, lo: int, hi: int) -> int | None:
    """Uniform draw from {lo..hi} inclusive, or None when the range is empty."""
    if hi < lo:
        return None
    return int(rng.integers(lo, hi + 1))


def generate_maze(rng: np.random.Generator, width: int, height: int) -> MazeSpec:
    """Sample a solvable four-room maze; raises MazeGenerationError after 100 tries."""
    if width < 5 or height < 5:
        raise ValueError("maze needs width >= 5 and height >= 5")
    for _ in range(GENERATION_ATTEMPTS):
        wall_col = int(rng.integers(1, width - 1))  # {1 .. width-2}
        wall_row = int(rng.integers(1, height - 1))
        gates = (
            _gate(rng, 1, wall_row - 1),
            _gate(rng, wall_row + 1, height - 2),
            _gate(rng, 1, wall_col - 1),
            _gate(rng, wall_col + 1, width - 2),
        )
        candidate = MazeSpec(width, height, wall_col, wall_row, gates, (0, 0), (0, 0))
        occ = candidate.occupancy()
        open_cells = np.flatnonzero(occ == 0)
        start_i, goal_i = rng.choice(len(open_cells), size=2, replace=False)
        start = (int(open_cells[start_i]) % width, int(open_cells[start_i]) // width)
        goal = (int(open_cells[goal_i]) % width, int(open_cells[goal_i]) // width)
        if reachable_cells(occ, width, height, start)[cell_index(goal, width)]:
            return MazeSpec(width, height, wall_col, wall_row, gates, start, goal)
    raise MazeGenerationError(f"no solvable {width}x{height} maze in {GENERATION_ATTEMPTS} attempts")


def high_reward(state: GoalState, goal: Cell, delta: float) -> int:
    """Sparse task reward: 1 iff squared distance to the goal is below delta^2."""
    return 1 if sq_dist(state.position, goal) < delta * delta else 0


@dataclass(frozen=True)
class EnvStepResult:
    next_state: GoalState
    env_reward: int
    done: bool


class MazeEnv:
    """Deterministic 5-action point navigation over a MazeSpec.

    Episodes end on the first goal reward or after `budget` steps. The
    trajectory is fully determined by (spec, action sequence).
    """

    def __init__(self, spec: "MazeSpec | CorridorSpec", budget: int, delta: float = 1.5):
        self.spec = spec
        self.budget = budget
        self.delta = delta
        self._occ = spec.occupancy()
        self.steps_taken = 0
        self.done = False
        self.succeeded = False
        self._position: Cell = spec.start

    def reset(self) -> GoalState:
        self.steps_taken = 0
        self.done = False
        self.succeeded = False
        self._position = self.spec.start
        return self._state()

    def _state(self) -> GoalState:
        return GoalState(self._position, self._occ, self.spec.width,
                         self.spec.height, self.spec.goal)

    def step(self, action: int) -> EnvStepResult:
        if self.done:
            raise EpisodeDoneError("episode is over; call reset()")
        dx, dy = ACTION_DELTAS[action]
        nx, ny = self._position[0] + dx, self._position[1] + dy
        blocked = not (0 <= nx < self.spec.width and 0 <= ny < self.spec.height) \
            or self._occ[ny * self.spec.width + nx]
        if not blocked:
            self._position = (nx, ny)
        self.steps_taken += 1
        next_state = self._state()
        reward = high_reward(next_state, self.spec.goal, self.delta)
        if reward:
            self.succeeded = True
        self.done = bool(reward) or self.steps_taken >= self.budget
        return EnvStepResult(next_state, reward, self.done)
