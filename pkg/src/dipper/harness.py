"""End-to-end experiment runner: training loops, baselines, metrics, reports.

One run = one (algorithm, seed) pair trained against a fixed env-step budget
with a fixed evaluation cadence, so algorithm comparisons are like for like.
Collection pairs consecutive episodes on the same maze so trajectory pairs
share a final goal. Reports render to a pinned CSV schema plus simple SVG
learning curves; with wall-time measurement off (the default) two identical
runs produce byte-identical CSV files.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (Cell, FlatTrajectory, GoalState, HighTrajectory, HighTransition,
                   ReplayBuffer, RunConfig, STREAM_NAMES, Subgoal, TrajectoryPair,
                   cell_index, derived_rng, feature_dim, features, index_cell,
                   rng_streams, sq_dist, validate_config)
from .envs import MazeEnv, N_ACTIONS, generate_maze
from .higher import (DpoBatch, HigherPolicy, PointerPolicy, SoftmaxPolicy,
                     dipper_loss_and_grad, dpo_flat_loss_and_grad)
from .lower import DiscreteSacAgent, ValueNet, rollout_lower, sac_update, train_value
from .nets import GradientError, adam_state, adam_step
from .prefs import OracleSpec, label_pair, relabel_dataset

CSV_HEADER = ("algo,seed,epoch,env_steps,success_rate,subgoal_distance,lower_q,"
              "higher_loss,critic_loss,actor_loss,wall_time_s")

_EVAL_KEY = 101  # spawn-key tag for per-epoch evaluation RNGs


class NumericAbort(RuntimeError):
    """A loss or update went non-finite; carries the run context."""

    def __init__(self, algo: str, seed: int, env_steps: int, message: str):
        super().__init__(f"numeric abort in {algo} seed={seed} env_steps={env_steps}: {message}")
        self.algo = algo
        self.seed = seed
        self.env_steps = env_steps


@dataclass
class EpochRow:
    epoch: int
    env_steps: int
    success_rate: float
    subgoal_distance: float
    lower_q: float
    higher_loss: float
    critic_loss: float
    actor_loss: float
    wall_time_s: float


@dataclass
class RunReport:
    algo: str
    seed: int
    rows: list[EpochRow]

    def final(self) -> EpochRow:
        return self.rows[-1]


@dataclass
class Experiment:
    config: RunConfig

    def run(self, workers: int = 1) -> list[RunReport]:
        return run_experiment(self.config, workers)


@dataclass
class EvalEpisode:
    # (state at subgoal emission, subgoal, position reached after the window)
    steps: list[tuple[GoalState, Subgoal, Cell]]
    success: bool


def subgoal_distance_metric(episodes: list[EvalEpisode]) -> float:
    """Mean Euclidean distance between emitted subgoals and window end positions."""
    dists = [math.sqrt(sq_dist(sg.cell, achieved))
             for ep in episodes for (_, sg, achieved) in ep.steps]
    if not dists:
        raise ValueError("no completed higher-level steps to evaluate")
    return float(np.mean(dists))


def lower_q_metric(episodes: list[EvalEpisode], value: ValueNet) -> float:
    """Mean predicted lower-level value of the emitted subgoals."""
    feats = [features(state, sg.cell) for ep in episodes for (state, sg, _) in ep.steps]
    if not feats:
        raise ValueError("no completed higher-level steps to evaluate")
    return float(np.mean(value.predict(np.stack(feats))))


def _mean(xs: list[float]) -> float:
    return float(np.mean(xs)) if xs else float("nan")


def make_dpo_batch(pairs: list[TrajectoryPair], value: ValueNet) -> DpoBatch:
    """Precompute frozen subgoal values for every step of every pair."""
    feats = []
    lengths = []
    for pair in pairs:
        for tau in (pair.tau1, pair.tau2):
            lengths.append(len(tau.steps))
            feats.extend(features(state, sg.cell) for state, sg in tau.steps)
    if feats:
        preds = value.predict(np.stack(feats))
    else:
        preds = np.zeros(0)
    values1, values2 = [], []
    offset = 0
    for i, n in enumerate(lengths):
        chunk = preds[offset : offset + n]
        offset += n
        (values1 if i % 2 == 0 else values2).append(np.asarray(chunk, dtype=np.float64))
    return DpoBatch(pairs, values1, values2)


def _hier_maker(config: RunConfig, seed: int):
    """Construct agents and buffers shared by the subgoal-level algorithms."""
    streams = rng_streams(seed)
    hidden = (config.hidden,) * config.layers
    n_feat = feature_dim(config.W, config.H)
    lower_agent = DiscreteSacAgent(
        n_feat, N_ACTIONS, hidden, config.activation,
        alpha=config.entropy_weight, gamma=config.gamma, polyak=config.polyak,
        pi_lr=config.pi_lr, q_lr=config.q_lr,
        adam_beta1=config.adam_beta1, adam_beta2=config.adam_beta2, rng=streams["lower"])
    value = ValueNet(n_feat, hidden, config.activation, config.value_lr,
                     config.adam_beta1, config.adam_beta2, streams["lower"])
    return streams, hidden, n_feat, lower_agent, value


def _train_hierarchical(config: RunConfig, seed: int) -> RunReport:
    algo = config.algorithm
    use_dpo = algo in ("DIPPER", "DIPPER_NO_V")
    lam = config.lam if algo == "DIPPER" else 0.0
    streams, hidden, n_feat, lower_agent, value = _hier_maker(config, seed)
    env_rng, lower_rng, higher_rng, pref_rng = (streams[n] for n in STREAM_NAMES)

    higher = None
    higher_opt = None
    high_agent: DiscreteSacAgent | None = None
    if use_dpo:
        head = PointerPolicy if config.higher_head == "pointer" else HigherPolicy
        higher = head(config.W, config.H, hidden, config.activation, higher_rng)
        higher_opt = adam_state(higher.params, config.higher_lr,
                                config.adam_beta1, config.adam_beta2)
    else:
        high_agent = DiscreteSacAgent(
            n_feat, config.W * config.H, hidden, config.activation,
            alpha=config.entropy_weight, gamma=config.gamma, polyak=config.polyak,
            pi_lr=config.pi_lr, q_lr=config.q_lr,
            adam_beta1=config.adam_beta1, adam_beta2=config.adam_beta2, rng=higher_rng)

    oracle = OracleSpec(config.pref_mode, config.pref_scoring, config.tie_tolerance)
    low_buf = ReplayBuffer(config.buffer_size)
    pair_data = ReplayBuffer(config.pair_buffer_size)
    high_buf = ReplayBuffer(config.buffer_size)

    def pick_train(state: GoalState) -> Subgoal:
        if use_dpo:
            return higher.sample_subgoal(state, higher_rng, "sample")
        idx = high_agent.act(features(state, state.final_goal), higher_rng,
                             "sample", config.random_eps)
        return Subgoal(index_cell(idx, config.W))

    def pick_greedy(state: GoalState) -> Subgoal:
        if use_dpo:
            return higher.sample_subgoal(state, mode="greedy")
        idx = high_agent.act(features(state, state.final_goal), mode="greedy")
        return Subgoal(index_cell(idx, config.W))

    rows: list[EpochRow] = []
    env_steps = 0
    epoch = 0
    next_relabel = config.m_relabel
    update_credit = 0.0
    try:
        while env_steps < config.total_env_steps:
            tick = time.perf_counter() if config.measure_wall_time else 0.0
            epoch_trajs: list[HighTrajectory] = []
            spec = None
            collected = 0
            for ep in range(config.episodes_per_epoch):
                if ep % 2 == 0:
                    spec = generate_maze(env_rng, config.W, config.H)
                env = MazeEnv(spec, config.episode_budget, config.delta)
                state = env.reset()
                steps: list[tuple[GoalState, Subgoal]] = []
                while not env.done and len(steps) < config.T:
                    subgoal = pick_train(state)
                    transitions, achieved = rollout_lower(
                        lower_agent, env, state, subgoal, config.K, lower_rng,
                        "sample", config.random_eps, config.epsilon)
                    for tr in transitions:
                        low_buf.push(tr)
                    collected += len(transitions)
                    if not use_dpo:
                        env_r = 1 if (env.done and env.succeeded) else 0
                        high_buf.push(HighTransition(state, subgoal, env_r, achieved, env.done))
                    steps.append((state, subgoal))
                    state = achieved
                epoch_trajs.append(HighTrajectory(tuple(steps), state))
            env_steps += collected

            # consecutive episodes share a maze, so their pair shares the goal
            for i in range(0, len(epoch_trajs) - 1, 2):
                t1, t2 = epoch_trajs[i], epoch_trajs[i + 1]
                if pref_rng.random() < 0.5:
                    t1, t2 = t2, t1
                label = label_pair(t1, t2, oracle, pref_rng, config.delta)
                pair_data.push(TrajectoryPair(t1, t2, label))
            while env_steps >= next_relabel:
                relabel_dataset(pair_data, oracle, pref_rng, config.delta)
                next_relabel += config.m_relabel

            if len(low_buf) >= config.batch_size:
                train_value(value, low_buf, lower_rng, config.m_value,
                            config.batch_size, config.gamma)

            higher_losses: list[float] = []
            if use_dpo and len(pair_data) > 0:
                for _ in range(config.n_batches):
                    n = min(config.pair_batch_size, len(pair_data))
                    pairs = pair_data.sample(higher_rng, n)
                    batch = make_dpo_batch(pairs, value)
                    loss, grad = dipper_loss_and_grad(higher, batch, config.beta, lam)
                    adam_step(higher_opt, higher.params, grad)
                    higher_losses.append(loss)
            elif not use_dpo and len(high_buf) >= config.batch_size:
                for _ in range(config.n_batches):
                    batch = high_buf.sample(higher_rng, config.batch_size)
                    feats = np.stack([features(t.state, t.state.final_goal) for t in batch])
                    nfeats = np.stack([features(t.next_state, t.next_state.final_goal)
                                       for t in batch])
                    actions = np.array([cell_index(t.subgoal.cell, config.W) for t in batch])
                    rewards = np.array([float(t.env_reward) for t in batch])
                    dones = np.array([1.0 if t.done else 0.0 for t in batch])
                    losses = high_agent.update(feats, actions, rewards, nfeats, dones)
                    higher_losses.append(losses.actor)

            critic_losses: list[float] = []
            actor_losses: list[float] = []
            update_credit += collected / config.lower_update_interval
            while update_credit >= 1.0:
                update_credit -= 1.0
                if len(low_buf) >= config.batch_size:
                    sl = sac_update(lower_agent, low_buf.sample(lower_rng, config.batch_size))
                    critic_losses.append(sl.critic)
                    actor_losses.append(sl.actor)

            success, sg_dist, low_q = _evaluate_hier(config, seed, epoch, lower_agent,
                                                     pick_greedy, value)
            wall = time.perf_counter() - tick if config.measure_wall_time else 0.0
            rows.append(EpochRow(epoch, env_steps, success, sg_dist, low_q,
                                 _mean(higher_losses), _mean(critic_losses),
                                 _mean(actor_losses), wall))
            epoch += 1
    except GradientError as exc:
        raise NumericAbort(algo, seed, env_steps, str(exc)) from exc
    return RunReport(algo, seed, rows)


def _evaluate_hier(config: RunConfig, seed: int, epoch: int, lower_agent: DiscreteSacAgent,
                   pick_greedy, value: ValueNet) -> tuple[float, float, float]:
    """Greedy evaluation on fresh mazes; the mazes depend only on (seed, epoch)."""
    rng = derived_rng(seed, _EVAL_KEY, epoch)
    episodes: list[EvalEpisode] = []
    wins = 0
    for _ in range(config.eval_episodes):
        spec = generate_maze(rng, config.W, config.H)
        env = MazeEnv(spec, config.episode_budget, config.delta)
        state = env.reset()
        steps: list[tuple[GoalState, Subgoal, Cell]] = []
        while not env.done and len(steps) < config.T:
            sg = pick_greedy(state)
            _, achieved = rollout_lower(lower_agent, env, state, sg, config.K,
                                        None, "greedy", 0.0, config.epsilon)
            steps.append((state, sg, achieved.position))
            state = achieved
        episodes.append(EvalEpisode(steps, env.succeeded))
        wins += 1 if env.succeeded else 0
    return (wins / config.eval_episodes, subgoal_distance_metric(episodes),
            lower_q_metric(episodes, value))


def _train_flat(config: RunConfig, seed: int) -> RunReport:
    streams = rng_streams(seed)
    env_rng, lower_rng, higher_rng, pref_rng = (streams[n] for n in STREAM_NAMES)
    hidden = (config.hidden,) * config.layers
    policy = SoftmaxPolicy(feature_dim(config.W, config.H), N_ACTIONS, hidden,
                           config.activation, higher_rng)
    opt = adam_state(policy.params, config.higher_lr, config.adam_beta1, config.adam_beta2)
    oracle = OracleSpec(config.pref_mode, config.pref_scoring, config.tie_tolerance)
    pair_data = ReplayBuffer(config.pair_buffer_size)

    rows: list[EpochRow] = []
    env_steps = 0
    epoch = 0
    next_relabel = config.m_relabel
    try:
        while env_steps < config.total_env_steps:
            tick = time.perf_counter() if config.measure_wall_time else 0.0
            epoch_trajs: list[FlatTrajectory] = []
            spec = None
            collected = 0
            for ep in range(config.episodes_per_epoch):
                if ep % 2 == 0:
                    spec = generate_maze(env_rng, config.W, config.H)
                env = MazeEnv(spec, config.episode_budget, config.delta)
                state = env.reset()
                steps: list[tuple[GoalState, int]] = []
                while not env.done:
                    action = policy.act(features(state, state.final_goal), lower_rng,
                                        "sample", config.random_eps)
                    result = env.step(action)
                    steps.append((state, action))
                    state = result.next_state
                collected += len(steps)
                epoch_trajs.append(FlatTrajectory(tuple(steps), state))
            env_steps += collected

            for i in range(0, len(epoch_trajs) - 1, 2):
                t1, t2 = epoch_trajs[i], epoch_trajs[i + 1]
                if pref_rng.random() < 0.5:
                    t1, t2 = t2, t1
                label = label_pair(t1, t2, oracle, pref_rng, config.delta)
                pair_data.push(TrajectoryPair(t1, t2, label))
            while env_steps >= next_relabel:
                relabel_dataset(pair_data, oracle, pref_rng, config.delta)
                next_relabel += config.m_relabel

            losses: list[float] = []
            if len(pair_data) > 0:
                for _ in range(config.n_batches):
                    n = min(config.pair_batch_size, len(pair_data))
                    pairs = pair_data.sample(higher_rng, n)
                    loss, grad = dpo_flat_loss_and_grad(policy, pairs, config.beta)
                    adam_step(opt, policy.params, grad)
                    losses.append(loss)

            rng = derived_rng(seed, _EVAL_KEY, epoch)
            wins = 0
            for _ in range(config.eval_episodes):
                spec_e = generate_maze(rng, config.W, config.H)
                env = MazeEnv(spec_e, config.episode_budget, config.delta)
                state = env.reset()
                while not env.done:
                    action = policy.act(features(state, state.final_goal), mode="greedy")
                    state = env.step(action).next_state
                wins += 1 if env.succeeded else 0
            wall = time.perf_counter() - tick if config.measure_wall_time else 0.0
            rows.append(EpochRow(epoch, env_steps, wins / config.eval_episodes,
                                 float("nan"), float("nan"), _mean(losses),
                                 float("nan"), float("nan"), wall))
            epoch += 1
    except GradientError as exc:
        raise NumericAbort(config.algorithm, seed, env_steps, str(exc)) from exc
    return RunReport(config.algorithm, seed, rows)


def train_run(config: RunConfig, seed: int | None = None) -> RunReport:
    """Train one (algorithm, seed) run and return its per-epoch report."""
    validate_config(config)
    seed = config.seeds[0] if seed is None else seed
    if config.algorithm == "DPO_FLAT":
        return _train_flat(config, seed)
    return _train_hierarchical(config, seed)


def train_dipper(config: RunConfig, seed: int | None = None) -> RunReport:
    return train_run(replace(config, algorithm="DIPPER"), seed)


def train_baseline(config: RunConfig, seed: int | None = None) -> RunReport:
    if config.algorithm not in ("DIPPER_NO_V", "DPO_FLAT", "HIER"):
        raise ValueError(f"not a baseline tag: {config.algorithm}")
    return train_run(config, seed)


def run_experiment(config: RunConfig, workers: int = 1) -> list[RunReport]:
    """Train every seed in the config; reports come back in seed order."""
    validate_config(config)
    if workers <= 1 or len(config.seeds) <= 1:
        return [train_run(config, s) for s in config.seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(train_run, config, s) for s in config.seeds]
        return [f.result() for f in futures]


def sweep(config: RunConfig, param: str, values: list[float],
          workers: int = 1) -> list[tuple[float, list[RunReport]]]:
    """Re-run the experiment for each value of `lambda` or `beta`, same seeds."""
    if param not in ("lambda", "beta"):
        raise ValueError("sweep parameter must be 'lambda' or 'beta'")
    if len(values) < 2:
        raise ValueError("a sweep needs at least two values")
    results: list[tuple[float, list[RunReport]]] = []
    for v in values:
        cfg = replace(config, lam=float(v)) if param == "lambda" else replace(config, beta=float(v))
        results.append((float(v), run_experiment(cfg, workers)))
    return results


def _fmt(x: float) -> str:
    return repr(float(x))


def report_csv(reports: list[RunReport]) -> str:
    lines = [CSV_HEADER]
    for report in reports:
        for row in report.rows:
            lines.append(",".join((
                report.algo, str(report.seed), str(row.epoch), str(row.env_steps),
                _fmt(row.success_rate), _fmt(row.subgoal_distance), _fmt(row.lower_q),
                _fmt(row.higher_loss), _fmt(row.critic_loss), _fmt(row.actor_loss),
                _fmt(row.wall_time_s))))
    return "\n".join(lines) + "\n"


def write_csv(reports: list[RunReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_csv(reports))


def sweep_csv(results: list[tuple[float, list[RunReport]]], param: str) -> str:
    lines = ["param,value,seed,final_success_rate,final_subgoal_distance,final_lower_q"]
    for value, reports in results:
        for report in reports:
            f = report.final()
            lines.append(",".join((param, _fmt(value), str(report.seed),
                                   _fmt(f.success_rate), _fmt(f.subgoal_distance),
                                   _fmt(f.lower_q))))
    return "\n".join(lines) + "\n"


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _chart_svg(reports: list[RunReport], metric: str) -> str:
    """Line chart of a metric vs env steps: mean line, +-1 std band across seeds."""
    by_algo: dict[str, list[RunReport]] = {}
    for r in reports:
        by_algo.setdefault(r.algo, []).append(r)
    width, height, ml, mr, mt, mb = 640, 400, 60, 20, 30, 40
    plot_w, plot_h = width - ml - mr, height - mt - mb
    series = {}
    x_max, y_min, y_max = 1.0, 0.0, 1e-9
    for algo, runs in sorted(by_algo.items()):
        n = min(len(r.rows) for r in runs)
        if n == 0:
            continue
        xs = np.mean([[row.env_steps for row in r.rows[:n]] for r in runs], axis=0)
        vals = np.array([[getattr(row, metric) for row in r.rows[:n]] for r in runs])
        mean, std = vals.mean(axis=0), vals.std(axis=0)
        keep = np.isfinite(mean)
        if not keep.any():
            continue
        xs, mean, std = xs[keep], mean[keep], std[keep]
        series[algo] = (xs, mean, std)
        x_max = max(x_max, float(xs.max()))
        y_min = min(y_min, float((mean - std).min()))
        y_max = max(y_max, float((mean + std).max()))
    span = (y_max - y_min) or 1.0

    def px(x: float) -> float:
        return ml + x / x_max * plot_w

    def py(y: float) -> float:
        return mt + (1.0 - (y - y_min) / span) * plot_h

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{ml}" y="18" font-family="monospace" font-size="14">{metric}</text>',
             f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" y2="{mt + plot_h}" '
             'stroke="black"/>',
             f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + plot_h}" stroke="black"/>',
             f'<text x="{ml + plot_w - 80}" y="{height - 8}" font-family="monospace" '
             f'font-size="11">env steps (max {int(x_max)})</text>',
             f'<text x="4" y="{mt + 10}" font-family="monospace" font-size="11">'
             f'{y_max:.3g}</text>',
             f'<text x="4" y="{mt + plot_h}" font-family="monospace" font-size="11">'
             f'{y_min:.3g}</text>']
    for i, (algo, (xs, mean, std)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        upper = [(px(x), py(m + s)) for x, m, s in zip(xs, mean, std)]
        lower = [(px(x), py(m - s)) for x, m, s in zip(xs, mean, std)]
        band = " ".join(f"{x:.2f},{y:.2f}" for x, y in upper + lower[::-1])
        line = " ".join(f"{px(x):.2f},{py(m):.2f}" for x, m in zip(xs, mean))
        parts.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + 8}" y="{mt + 16 + 14 * i}" font-family="monospace" '
                     f'font-size="12" fill="{color}">{algo}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_report(reports: list[RunReport], out_prefix: str | Path) -> list[Path]:
    """Write `<prefix>.csv` plus one SVG learning curve per metric."""
    if not reports:
        raise ValueError("nothing to render")
    prefix = Path(out_prefix)
    if prefix.parent and not prefix.parent.exists():
        raise FileNotFoundError(f"output directory does not exist: {prefix.parent}")
    written = [prefix.with_suffix(".csv")]
    write_csv(reports, written[0])
    for metric in ("success_rate", "subgoal_distance", "lower_q"):
        path = prefix.parent / f"{prefix.name}_{metric}.svg"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(_chart_svg(reports, metric))
        written.append(path)
    return written
