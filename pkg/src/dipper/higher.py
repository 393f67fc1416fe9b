"""Subgoal policy over the cell lattice and its preference-based losses.

The policy emits logits over all W*H cells (walls included; learning to avoid
infeasible targets is the algorithm's job, helped by the value regularizer).
Environment-time sampling uses the plain softmax of the logits; the
preference loss scales log-probabilities by the temperature `beta` and adds
`lam` times the precomputed subgoal values, which are treated as constants so
no gradient reaches the value network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (Cell, FlatTrajectory, GoalState, HighTrajectory, Subgoal, TrajectoryPair,
                   cell_index, feature_dim, features, index_cell)
from .nets import ParamTensor, MlpSpec, backward, forward, init_params, log_softmax, sigmoid, softplus


class SoftmaxPolicy:
    """MLP logits over a finite set of choices, sampled at temperature 1."""

    def __init__(self, n_inputs: int, n_outputs: int, hidden_dims: tuple[int, ...],
                 activation: str, rng: np.random.Generator):
        self.n_outputs = n_outputs
        self.params = init_params(MlpSpec(n_inputs, hidden_dims, n_outputs, activation), rng)

    def logits(self, x: np.ndarray) -> np.ndarray:
        out, _ = forward(self.params, x)
        return out

    def act(self, feats: np.ndarray, rng: np.random.Generator | None = None,
            mode: str = "sample", random_eps: float = 0.0) -> int:
        if mode == "greedy":
            return int(np.argmax(self.logits(feats)))
        assert rng is not None, "sampling requires an RNG"
        if random_eps > 0.0 and rng.random() < random_eps:
            return int(rng.integers(self.n_outputs))
        p = np.exp(log_softmax(self.logits(feats)))
        return int(rng.choice(self.n_outputs, p=p))

    # step-level interface shared with PointerPolicy so the preference losses
    # are policy-architecture agnostic
    def step_log_probs(self, states: list[GoalState]):
        if states:
            x = np.stack([features(s, s.final_goal) for s in states])
        else:
            x = np.zeros((0, self.params.spec.input_dim))
        logits, cache = forward(self.params, x)
        return log_softmax(logits), cache

    def backward_logits(self, cache, upstream: np.ndarray) -> np.ndarray:
        return backward(self.params, cache, upstream)


class HigherPolicy(SoftmaxPolicy):
    """Subgoal picker: (state, final goal) features to W*H cell logits."""

    def __init__(self, width: int, height: int, hidden_dims: tuple[int, ...],
                 activation: str, rng: np.random.Generator):
        super().__init__(feature_dim(width, height), width * height, hidden_dims,
                         activation, rng)
        self.width = width
        self.height = height

    def sample_subgoal(self, state: GoalState, rng: np.random.Generator | None = None,
                       mode: str = "sample") -> Subgoal:
        idx = self.act(features(state, state.final_goal), rng, mode)
        return Subgoal(index_cell(idx, self.width))


class PointerPolicy:
    """Subgoal picker that scores every lattice cell with one shared network.

    Each candidate cell's logit is the scalar output of the same MLP applied
    to (agent position, goal, local wall patch, candidate geometry), so what
    is learned about one cell transfers to every cell and every maze. The
    observable interface matches HigherPolicy: lattice logits, temperature-1
    sampling, greedy argmax.
    """

    _CAND_DIMS = 9

    def __init__(self, width: int, height: int, hidden_dims: tuple[int, ...],
                 activation: str, rng: np.random.Generator):
        self.width = width
        self.height = height
        self.n_outputs = width * height
        side = 2 * 2 + 1  # agent-centric patch kept from the shared featurizer
        self._base_dim = 6 + side * side
        self.params = init_params(
            MlpSpec(self._base_dim + self._CAND_DIMS, hidden_dims, 1, activation), rng)
        n = self.n_outputs
        self._cand_x = np.arange(n) % width
        self._cand_y = np.arange(n) // width
        self._diag = math.hypot(width, height)

    def _context_rows(self, state: GoalState) -> np.ndarray:
        base = features(state, state.final_goal)[: self._base_dim]
        w, h = self.width, self.height
        px, py = state.position
        gx, gy = state.final_goal
        rows = np.empty((self.n_outputs, self._base_dim + self._CAND_DIMS))
        rows[:, : self._base_dim] = base
        c = self._base_dim
        rows[:, c + 0] = (self._cand_x + 0.5) / w * 2.0 - 1.0
        rows[:, c + 1] = (self._cand_y + 0.5) / h * 2.0 - 1.0
        rows[:, c + 2] = (self._cand_x - px) / w
        rows[:, c + 3] = (self._cand_y - py) / h
        rows[:, c + 4] = (self._cand_x - gx) / w
        rows[:, c + 5] = (self._cand_y - gy) / h
        rows[:, c + 6] = np.hypot(self._cand_x - px, self._cand_y - py) / self._diag
        rows[:, c + 7] = np.hypot(self._cand_x - gx, self._cand_y - gy) / self._diag
        rows[:, c + 8] = state.maze
        return rows

    def lattice_logits(self, state: GoalState) -> np.ndarray:
        out, _ = forward(self.params, self._context_rows(state))
        return out[:, 0]

    def sample_subgoal(self, state: GoalState, rng: np.random.Generator | None = None,
                       mode: str = "sample") -> Subgoal:
        logits = self.lattice_logits(state)
        if mode == "greedy":
            idx = int(np.argmax(logits))
        else:
            assert rng is not None, "sampling requires an RNG"
            idx = int(rng.choice(self.n_outputs, p=np.exp(log_softmax(logits))))
        return Subgoal(index_cell(idx, self.width))

    def step_log_probs(self, states: list[GoalState]):
        if states:
            x = np.concatenate([self._context_rows(s) for s in states])
        else:
            x = np.zeros((0, self.params.spec.input_dim))
        scores, cache = forward(self.params, x)
        logits = scores[:, 0].reshape(len(states), self.n_outputs) if states \
            else np.zeros((0, self.n_outputs))
        return log_softmax(logits), cache

    def backward_logits(self, cache, upstream: np.ndarray) -> np.ndarray:
        return backward(self.params, cache, upstream.reshape(-1, 1))


@dataclass
class DpoBatch:
    """Trajectory pairs plus the frozen per-step subgoal values of both sides."""

    pairs: list[TrajectoryPair]
    values1: list[np.ndarray]
    values2: list[np.ndarray]

    def __post_init__(self) -> None:
        if not (len(self.pairs) == len(self.values1) == len(self.values2)):
            raise ValueError("need one value array per pair and side")
        for pair, v1, v2 in zip(self.pairs, self.values1, self.values2):
            if len(v1) != len(pair.tau1.steps) or len(v2) != len(pair.tau2.steps):
                raise ValueError("value cache length does not match trajectory length")
            if not (np.all(np.isfinite(v1)) and np.all(np.isfinite(v2))):
                raise ValueError("subgoal values must be finite")


def _high_step(tau: HighTrajectory, t: int, width: int) -> tuple[GoalState, int]:
    state, subgoal = tau.steps[t]
    return state, cell_index(subgoal.cell, width)


def _flat_step(tau: FlatTrajectory, t: int, width: int) -> tuple[GoalState, int]:
    state, action = tau.steps[t]
    return state, action


def _stack_pairs(pairs: Sequence[TrajectoryPair], width: int, encode: Callable,
                 ) -> tuple[list[GoalState], np.ndarray, np.ndarray, np.ndarray]:
    """Flatten every step of every pair into (states, picked, pair index, sign).

    Sign is +1 for steps of tau1 and -1 for steps of tau2.
    """
    states, picked, pair_idx, sign = [], [], [], []
    for p, pair in enumerate(pairs):
        for tau, s in ((pair.tau1, 1.0), (pair.tau2, -1.0)):
            for t in range(len(tau.steps)):
                st, g = encode(tau, t, width)
                states.append(st)
                picked.append(g)
                pair_idx.append(p)
                sign.append(s)
    return (states, np.asarray(picked, dtype=np.int64),
            np.asarray(pair_idx, dtype=np.int64), np.asarray(sign))


def _value_deltas(batch: DpoBatch) -> np.ndarray:
    return np.array([float(np.sum(v1)) - float(np.sum(v2))
                     for v1, v2 in zip(batch.values1, batch.values2)])


def _labels(pairs: Sequence[TrajectoryPair]) -> np.ndarray:
    return np.array([pair.label.y[0] for pair in pairs])


def _preference_loss_and_grad(policy, pairs: Sequence[TrajectoryPair], beta: float,
                              extra_delta: np.ndarray, encode: Callable, width: int,
                              want_grad: bool) -> tuple[float, np.ndarray | None]:
    states, picked, pair_idx, sign = _stack_pairs(pairs, width, encode)
    n_pairs = len(pairs)
    logp, cache = policy.step_log_probs(states)
    # per-side log-prob sums, subtracted once, so swapping a pair negates the
    # margin exactly and identical sides give margin 0 exactly
    side_sums = np.zeros((n_pairs, 2))
    np.add.at(side_sums, (pair_idx, (sign < 0).astype(np.int64)),
              logp[np.arange(len(picked)), picked])
    delta = beta * (side_sums[:, 0] - side_sums[:, 1]) + extra_delta
    y1 = _labels(pairs)
    # cross-entropy against (sigmoid(delta), 1 - sigmoid(delta)), computed stably
    loss = float(np.mean(y1 * softplus(-delta) + (1.0 - y1) * softplus(delta)))
    if not want_grad:
        return loss, None
    dl_ddelta = (sigmoid(delta) - y1) / n_pairs
    coeff = dl_ddelta[pair_idx] * sign * beta
    upstream = -np.exp(logp) * coeff[:, None]
    upstream[np.arange(len(picked)), picked] += coeff
    return loss, policy.backward_logits(cache, upstream)


def dipper_loss(policy, batch: DpoBatch, beta: float, lam: float) -> float:
    """Preference cross-entropy with value-regularized log-probability margins.

    Per pair, delta = sum_t [beta * (log pi(g1_t) - log pi(g2_t))
    + lam * (V(s1_t, g1_t) - V(s2_t, g2_t))]; the loss is the label
    cross-entropy against sigmoid(delta). With lam = 0 this is exactly the
    unregularized objective, same code path. Accepts HigherPolicy or
    PointerPolicy.
    """
    if beta <= 0 or lam < 0:
        raise ValueError("need beta > 0 and lam >= 0")
    loss, _ = _preference_loss_and_grad(policy, batch.pairs, beta, lam * _value_deltas(batch),
                                        _high_step, policy.width, want_grad=False)
    return loss


def dipper_loss_and_grad(policy, batch: DpoBatch, beta: float,
                         lam: float) -> tuple[float, np.ndarray]:
    if beta <= 0 or lam < 0:
        raise ValueError("need beta > 0 and lam >= 0")
    loss, grad = _preference_loss_and_grad(policy, batch.pairs, beta, lam * _value_deltas(batch),
                                           _high_step, policy.width, want_grad=True)
    return loss, grad


def dipper_grad_closed_form(policy, batch: DpoBatch, beta: float,
                            lam: float) -> np.ndarray:
    """Gradient assembled from the analytic form, for cross-checking.

    For each hard-labelled pair, the preferred side's summed grad-log-prob is
    pushed up and the dispreferred side's pushed down, weighted by the
    sigmoid of how badly the implicit rewards (beta * log pi + lam * V) rank
    the pair. Soft (0.5, 0.5) labels are not supported here.
    """
    grad = np.zeros_like(policy.params.flat)
    n_pairs = len(batch.pairs)
    for pair, v1, v2 in zip(batch.pairs, batch.values1, batch.values2):
        if not pair.label.is_hard:
            raise ValueError("closed-form gradient requires hard labels")
        if pair.label.y == (1.0, 0.0):
            pref, disp = pair.tau1, pair.tau2
            v_pref, v_disp = v1, v2
        else:
            pref, disp = pair.tau2, pair.tau1
            v_pref, v_disp = v2, v1

        def side(tau, values):
            if not tau.steps:
                return 0.0, None, None, None
            pairs_sg = [_high_step(tau, t, policy.width) for t in range(len(tau.steps))]
            g = np.asarray([p[1] for p in pairs_sg], dtype=np.int64)
            logp, cache = policy.step_log_probs([p[0] for p in pairs_sg])
            r_hat = beta * float(np.sum(logp[np.arange(len(g)), g])) + lam * float(np.sum(values))
            return r_hat, cache, logp, g

        r_pref, cache_p, logp_p, g_p = side(pref, v_pref)
        r_disp, cache_d, logp_d, g_d = side(disp, v_disp)
        weight = float(sigmoid(r_disp - r_pref))

        def sum_grad_logp(cache, logp, g):
            if cache is None:
                return 0.0
            upstream = -np.exp(logp)
            upstream[np.arange(len(g)), g] += 1.0
            return policy.backward_logits(cache, upstream)

        grad -= beta * weight * (sum_grad_logp(cache_p, logp_p, g_p)
                                 - sum_grad_logp(cache_d, logp_d, g_d)) / n_pairs
    return grad


def dpo_flat_loss(policy: SoftmaxPolicy, pairs: Sequence[TrajectoryPair],
                  beta: float) -> float:
    """Preference loss over primitive-action trajectories (no value term).

    A uniform reference policy would add the same constant to every step of
    both sides, so it cancels from the margin and is omitted.
    """
    loss, _ = _preference_loss_and_grad(policy, pairs, beta,
                                        np.zeros(len(pairs)), _flat_step, 0, want_grad=False)
    return loss


def dpo_flat_loss_and_grad(policy: SoftmaxPolicy, pairs: Sequence[TrajectoryPair],
                           beta: float) -> tuple[float, np.ndarray]:
    loss, grad = _preference_loss_and_grad(policy, pairs, beta,
                                           np.zeros(len(pairs)), _flat_step, 0, want_grad=True)
    return loss, grad


def trajectory_log_prob_sum(policy, tau: HighTrajectory | FlatTrajectory,
                            width: int | None = None) -> float:
    """Sum of log pi over a trajectory's chosen subgoals or actions."""
    encode = _high_step if isinstance(tau, HighTrajectory) else _flat_step
    w = width if width is not None else getattr(policy, "width", 0)
    pairs_sg = [encode(tau, t, w) for t in range(len(tau.steps))]
    if not pairs_sg:
        return 0.0
    logp, _ = policy.step_log_probs([p[0] for p in pairs_sg])
    return float(sum(logp[i, g] for i, (_, g) in enumerate(pairs_sg)))
