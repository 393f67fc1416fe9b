"""Shared domain types, replay storage, RNG streams, and run configuration.

Positions are integer grid cells (x, y) with x in [0, W) and y in [0, H).
Distances are squared Euclidean in cell units unless a function says
otherwise. Maze occupancy is a flat binary array of length W*H in row-major
order (1 = wall).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator, NamedTuple, Sequence

import numpy as np

Cell = tuple[int, int]

ALGORITHMS = ("DIPPER", "DIPPER_NO_V", "DPO_FLAT", "HIER")
PREF_MODES = ("deterministic", "bradley_terry")
PREF_SCORINGS = ("sparse_final_reward", "negative_goal_distance")
ACTIVATIONS = ("tanh", "relu")

STREAM_NAMES = ("env", "lower", "higher", "preference")

LABEL_FIRST = (1.0, 0.0)
LABEL_SECOND = (0.0, 1.0)
LABEL_TIE = (0.5, 0.5)


class ConfigError(ValueError):
    """Unknown key or out-of-range value in run configuration text."""


class EmptyBufferError(RuntimeError):
    """Sampling from a buffer that holds no items."""


def sq_dist(a: Cell, b: Cell) -> int:
    return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2


def cell_index(cell: Cell, width: int) -> int:
    return cell[1] * width + cell[0]


def index_cell(index: int, width: int) -> Cell:
    return (index % width, index // width)


@dataclass(frozen=True, eq=False)
class GoalState:
    """Agent observation: position, maze occupancy, and the episode goal."""

    position: Cell
    maze: np.ndarray  # flat uint8, length width*height, shared within an episode
    width: int
    height: int
    final_goal: Cell

    def validate(self) -> None:
        if self.maze.shape != (self.width * self.height,):
            raise ValueError("maze length does not match width*height")
        if not np.all((self.maze == 0) | (self.maze == 1)):
            raise ValueError("maze entries must be 0 or 1")
        for name, cell in (("position", self.position), ("final_goal", self.final_goal)):
            x, y = cell
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"{name} out of bounds: {cell}")
            if self.maze[cell_index(cell, self.width)]:
                raise ValueError(f"{name} lies on a wall cell: {cell}")


class Subgoal(NamedTuple):
    """Higher-level action: a target cell, possibly infeasible (even a wall)."""

    cell: Cell


@dataclass
class LowTransition:
    state: GoalState
    subgoal: Subgoal
    action: int
    reward: int  # 1 iff next_state is within the subgoal radius
    next_state: GoalState
    done: bool


@dataclass
class HighTransition:
    state: GoalState
    subgoal: Subgoal
    env_reward: int
    next_state: GoalState  # state observed after the K-step window (or episode end)
    done: bool = False


@dataclass(frozen=True)
class HighTrajectory:
    """Subgoal-level episode: (state, subgoal) decision points plus the final state."""

    steps: tuple[tuple[GoalState, Subgoal], ...]
    final_state: GoalState

    @property
    def final_goal(self) -> Cell:
        return self.final_state.final_goal

    def visited_positions(self) -> list[Cell]:
        return [s.position for s, _ in self.steps] + [self.final_state.position]

    def validate(self) -> None:
        for s, _ in self.steps:
            if s.final_goal != self.final_state.final_goal:
                raise ValueError("trajectory steps disagree on the final goal")


@dataclass(frozen=True)
class FlatTrajectory:
    """Primitive-action episode used by the non-hierarchical preference baseline."""

    steps: tuple[tuple[GoalState, int], ...]
    final_state: GoalState

    @property
    def final_goal(self) -> Cell:
        return self.final_state.final_goal

    def visited_positions(self) -> list[Cell]:
        return [s.position for s, _ in self.steps] + [self.final_state.position]


@dataclass(frozen=True)
class PreferenceLabel:
    """Pairwise preference: (1,0), (0,1), or (0.5,0.5) for no preference."""

    y: tuple[float, float]

    def __post_init__(self) -> None:
        if self.y not in (LABEL_FIRST, LABEL_SECOND, LABEL_TIE):
            raise ValueError(f"invalid preference label {self.y}")

    @property
    def is_hard(self) -> bool:
        return self.y != LABEL_TIE

    def flipped(self) -> "PreferenceLabel":
        return PreferenceLabel((self.y[1], self.y[0]))


@dataclass
class TrajectoryPair:
    """Two trajectories over the same final goal plus a preference label."""

    tau1: HighTrajectory | FlatTrajectory
    tau2: HighTrajectory | FlatTrajectory
    label: PreferenceLabel

    def validate(self) -> None:
        if self.tau1.final_goal != self.tau2.final_goal:
            raise ValueError("paired trajectories must share the final goal")


class ReplayBuffer:
    """Bounded FIFO store with uniform seeded sampling (without replacement).

    Oldest items are evicted first once capacity is reached. Sampling more
    items than stored is an error; sampling from an empty buffer raises
    EmptyBufferError.
    """

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("buffer capacity must be positive")
        self.capacity = capacity
        self._items: list = []
        self._pos = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, item) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._pos % self.capacity] = item
        self._pos += 1

    def sample(self, rng: np.random.Generator, n: int) -> list:
        if not self._items:
            raise EmptyBufferError("cannot sample from an empty buffer")
        if n > len(self._items):
            raise ValueError(f"requested {n} items but buffer holds {len(self._items)}")
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]

    def items(self) -> Iterator:
        return iter(self._items)


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Split one run seed into independent named generators.

    Ablations that share a seed then differ only in the streams they consume.
    """
    children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
    return {name: np.random.default_rng(seq) for name, seq in zip(STREAM_NAMES, children)}


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator keyed by (seed, *key), independent of stream consumption order."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


_PATCH_RADIUS = 2  # egocentric wall window: (2r+1)^2 cells around the agent


def feature_dim(width: int, height: int) -> int:
    side = 2 * _PATCH_RADIUS + 1
    return width * height + 6 + side * side


def features(state: GoalState, target: Cell) -> np.ndarray:
    """Network input: scaled position and target, target-minus-position offset,
    an egocentric wall patch, and the full maze occupancy.

    Scaling maps cell centers into (-1, 1) so tanh trunks see balanced inputs.
    The offset gives small networks a direct bearing signal, and the local
    patch exposes the walls around the agent without requiring the network to
    learn position-conditioned lookups into the global maze array;
    out-of-bounds patch cells read as walls.
    """
    w, h = state.width, state.height
    r = _PATCH_RADIUS
    side = 2 * r + 1
    out = np.empty(w * h + 6 + side * side, dtype=np.float64)
    out[0] = (state.position[0] + 0.5) / w * 2.0 - 1.0
    out[1] = (state.position[1] + 0.5) / h * 2.0 - 1.0
    out[2] = (target[0] + 0.5) / w * 2.0 - 1.0
    out[3] = (target[1] + 0.5) / h * 2.0 - 1.0
    out[4] = (target[0] - state.position[0]) / w
    out[5] = (target[1] - state.position[1]) / h
    padded = np.ones((h + 2 * r, w + 2 * r))
    padded[r : r + h, r : r + w] = state.maze.reshape(h, w)
    x, y = state.position
    out[6 : 6 + side * side] = padded[y : y + side, x : x + side].ravel()
    out[6 + side * side :] = state.maze
    return out


@dataclass(frozen=True)
class RunConfig:
    """Full experiment configuration; see README for the key-value file format."""

    # environment
    W: int = 8
    H: int = 8
    delta: float = 1.5  # goal radius in cells (reward when squared distance < delta^2)
    epsilon: float = 1.5  # subgoal radius in cells
    T: int = 15  # subgoal decisions per episode
    K: int = 15  # primitive steps per subgoal window
    # objective weights
    beta: float = 1.0  # preference-loss temperature on log-probabilities
    lam: float = 1.0  # subgoal-value regularization weight (config key: lambda)
    entropy_weight: float = 0.05  # lower-level max-ent coefficient
    gamma: float = 0.95
    # networks and optimization
    hidden: int = 512
    layers: int = 3
    activation: str = "tanh"
    higher_head: str = "flat"  # flat: one logit per cell; pointer: shared per-cell scorer
    q_lr: float = 0.001
    pi_lr: float = 0.001
    value_lr: float = 0.001
    higher_lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    polyak: float = 0.05  # fraction moved toward online params per target update
    batch_size: int = 1024
    pair_batch_size: int = 50
    buffer_size: int = 100_000
    pair_buffer_size: int = 100_000
    # training cadence
    total_env_steps: int = 200_000
    episodes_per_epoch: int = 20
    n_batches: int = 10  # higher-level gradient steps per epoch
    lower_update_interval: int = 8  # env steps per lower-level gradient step
    m_value: int = 50  # value-function fitting iterations per epoch
    m_relabel: int = 1000  # env steps between preference relabeling passes
    eval_episodes: int = 20
    random_eps: float = 0.2  # chance of a uniform random primitive action while training
    # preference oracle
    pref_mode: str = "bradley_terry"
    pref_scoring: str = "negative_goal_distance"
    tie_tolerance: float = 1e-9
    # run identity
    algorithm: str = "DIPPER"
    seeds: tuple[int, ...] = (0,)
    measure_wall_time: bool = False

    @property
    def episode_budget(self) -> int:
        """Total primitive steps per episode, factorized as T * K."""
        return self.T * self.K


_KEY_TO_FIELD = {f.name: f.name for f in fields(RunConfig)}
_KEY_TO_FIELD["lambda"] = "lam"
del _KEY_TO_FIELD["lam"]
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}


def _parse_value(key: str, field_name: str, raw: str):
    ftype = RunConfig.__dataclass_fields__[field_name].type
    raw = raw.strip()
    try:
        if field_name == "seeds":
            return tuple(int(s) for s in raw.split(","))
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for key '{key}': {raw!r}") from exc


def validate_config(cfg: RunConfig) -> None:
    """Range-check every field; raises ConfigError naming the offending key."""

    def check(ok: bool, key: str, msg: str) -> None:
        if not ok:
            raise ConfigError(f"config key '{key}': {msg}")

    check(cfg.W >= 5, "W", "grid width must be >= 5")
    check(cfg.H >= 5, "H", "grid height must be >= 5")
    check(cfg.delta > 0, "delta", "must be positive")
    check(cfg.epsilon > 0, "epsilon", "must be positive")
    check(cfg.T >= 1, "T", "must be >= 1")
    check(cfg.K >= 1, "K", "must be >= 1")
    check(cfg.beta > 0, "beta", "must be positive")
    check(cfg.lam >= 0, "lambda", "must be non-negative")
    check(cfg.entropy_weight >= 0, "entropy_weight", "must be non-negative")
    check(0 < cfg.gamma <= 1, "gamma", "must be in (0, 1]")
    check(cfg.hidden >= 1, "hidden", "must be >= 1")
    check(cfg.layers >= 1, "layers", "must be >= 1")
    check(cfg.activation in ACTIVATIONS, "activation", f"must be one of {ACTIVATIONS}")
    check(cfg.higher_head in ("flat", "pointer"), "higher_head", "must be flat or pointer")
    for key in ("q_lr", "pi_lr", "value_lr", "higher_lr"):
        check(getattr(cfg, key) > 0, key, "must be positive")
    check(0 < cfg.adam_beta1 < 1, "adam_beta1", "must be in (0, 1)")
    check(0 < cfg.adam_beta2 < 1, "adam_beta2", "must be in (0, 1)")
    check(0 < cfg.polyak <= 1, "polyak", "must be in (0, 1]")
    for key in ("batch_size", "pair_batch_size", "buffer_size", "pair_buffer_size",
                "total_env_steps",
                "episodes_per_epoch", "n_batches", "lower_update_interval",
                "m_value", "m_relabel", "eval_episodes"):
        check(getattr(cfg, key) >= 1, key, "must be >= 1")
    check(0 <= cfg.random_eps <= 1, "random_eps", "must be in [0, 1]")
    check(cfg.pref_mode in PREF_MODES, "pref_mode", f"must be one of {PREF_MODES}")
    check(cfg.pref_scoring in PREF_SCORINGS, "pref_scoring", f"must be one of {PREF_SCORINGS}")
    check(cfg.tie_tolerance >= 0, "tie_tolerance", "must be non-negative")
    check(cfg.algorithm in ALGORITHMS, "algorithm", f"must be one of {ALGORITHMS}")
    check(len(cfg.seeds) >= 1, "seeds", "need at least one seed")


def parse_config(text: str) -> RunConfig:
    """Parse line-oriented `key = value` text; '#' starts a comment.

    Unspecified keys keep their defaults. Raises ConfigError for unknown keys,
    malformed lines, or out-of-range values.
    """
    overrides: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        field_name = _KEY_TO_FIELD[key]
        overrides[field_name] = _parse_value(key, field_name, raw)
    cfg = RunConfig(**overrides)
    validate_config(cfg)
    return cfg


def render_config(cfg: RunConfig) -> str:
    """Inverse of parse_config: parse_config(render_config(cfg)) == cfg."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.name == "seeds":
            rendered = ",".join(str(s) for s in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{_FIELD_TO_KEY[f.name]} = {rendered}")
    return "\n".join(lines) + "\n"
