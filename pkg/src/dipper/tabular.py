"""Exact finite-horizon solvers for tiny enumerable MDPs.

Backward-induction soft (max-entropy) value iteration, the reward/Q-function
bijection residual, the telescoped-return identity relating trajectory
returns to summed log-policy terms, the exact form of the value-regularized
preference objective, and a fixed-point check of the preference gradient at
the soft-optimal policy. Everything here is small enough to verify by brute
force, which is the point.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nets import sigmoid, softplus

MAX_STATES = 8
MAX_ACTIONS = 4
MAX_HORIZON = 6

_KERNEL_TOL = 1e-12


@dataclass(frozen=True)
class TabularMdp:
    """Finite-horizon MDP small enough to enumerate every trajectory.

    The reward table may already fold auxiliary per-step terms (for example a
    value-gap penalty) into a single scalar R(s, a).
    """

    n_states: int
    n_actions: int
    horizon: int
    kernel: np.ndarray  # (S, A, S) rows over next states
    rewards: np.ndarray  # (S, A)

    def __post_init__(self) -> None:
        if not (1 <= self.n_states <= MAX_STATES and 1 <= self.n_actions <= MAX_ACTIONS
                and 1 <= self.horizon <= MAX_HORIZON):
            raise ValueError("MDP exceeds enumerable size caps")
        if self.kernel.shape != (self.n_states, self.n_actions, self.n_states):
            raise ValueError("kernel shape must be (S, A, S)")
        if self.rewards.shape != (self.n_states, self.n_actions):
            raise ValueError("rewards shape must be (S, A)")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        row_sums = self.kernel.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > _KERNEL_TOL:
            raise ValueError("kernel rows must sum to 1")

    def is_deterministic(self) -> bool:
        return bool(np.all(np.max(self.kernel, axis=2) == 1.0))

    def next_state(self, s: int, a: int) -> int:
        return int(np.argmax(self.kernel[s, a]))


@dataclass(frozen=True)
class TabularTrajectory:
    states: tuple[int, ...]
    actions: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.states) != len(self.actions):
            raise ValueError("need one state per action")


@dataclass(frozen=True)
class TabularPair:
    tau1: TabularTrajectory
    tau2: TabularTrajectory
    y: tuple[float, float]


@dataclass(frozen=True)
class SoftSolution:
    """Time-indexed soft-optimal values and policy at temperature beta."""

    beta: float
    v: np.ndarray  # (H+1, S), v[H] = 0
    q: np.ndarray  # (H, S, A)
    log_pi: np.ndarray  # (H, S, A)

    @property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi)


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def soft_value_iteration(mdp: TabularMdp, beta: float) -> SoftSolution:
    """Backward induction with the log-sum-exp soft maximum.

    Q_t(s,a) = R(s,a) + E_{s'}[V_{t+1}(s')], V_t(s) = beta * lse(Q_t(s,.)/beta),
    terminal V_H = 0, and log pi_t = (Q_t - V_t) / beta.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    h, s_n, a_n = mdp.horizon, mdp.n_states, mdp.n_actions
    v = np.zeros((h + 1, s_n))
    q = np.zeros((h, s_n, a_n))
    log_pi = np.zeros((h, s_n, a_n))
    for t in range(h - 1, -1, -1):
        q[t] = mdp.rewards + mdp.kernel @ v[t + 1]
        v[t] = beta * _logsumexp(q[t] / beta, axis=1)
        log_pi[t] = (q[t] - v[t][:, None]) / beta
    return SoftSolution(beta, v, q, log_pi)


def check_bijection(mdp: TabularMdp, sol: SoftSolution) -> float:
    """Max |R(s,a) - (Q_t(s,a) - E_{s'}[V_{t+1}(s')])| over all (t, s, a).

    For deterministic kernels the expectation equals the realized next-state
    value, so the residual vanishes to rounding error.
    """
    worst = 0.0
    for t in range(mdp.horizon):
        expected_next = mdp.kernel @ sol.v[t + 1]
        residual = np.abs(mdp.rewards - (sol.q[t] - expected_next))
        worst = max(worst, float(residual.max()))
    return worst


def rollout_states(mdp: TabularMdp, s0: int, actions: Sequence[int]) -> tuple[int, ...]:
    """Realized state sequence of an action sequence (deterministic kernels only)."""
    if not mdp.is_deterministic():
        raise ValueError("state rollout needs a deterministic kernel")
    states = [s0]
    for a in actions:
        states.append(mdp.next_state(states[-1], a))
    return tuple(states)


def trajectory_return(mdp: TabularMdp, states: Sequence[int], actions: Sequence[int]) -> float:
    return float(sum(mdp.rewards[s, a] for s, a in zip(states, actions)))


def check_telescoping(mdp: TabularMdp, sol: SoftSolution, actions: Sequence[int],
                      states: Sequence[int] | None = None) -> tuple[float, float, float]:
    """Compare the summed reward along a trajectory with V_0(s0) + sum beta*log pi.

    Returns (lhs, rhs, |lhs - rhs|). The identity is exact for deterministic
    transitions; for stochastic kernels pass the realized `states` and read the
    gap, which is generally nonzero.
    """
    if len(actions) != mdp.horizon:
        raise ValueError("action sequence must cover the full horizon")
    if states is None:
        states = rollout_states(mdp, 0, actions)
    lhs = trajectory_return(mdp, states, actions)
    rhs = float(sol.v[0, states[0]])
    for t, (s, a) in enumerate(zip(states, actions)):
        rhs += sol.beta * float(sol.log_pi[t, s, a])
    return lhs, rhs, abs(lhs - rhs)


def enumerate_trajectories(mdp: TabularMdp, s0: int = 0) -> list[TabularTrajectory]:
    """All action sequences from s0 with their realized states (deterministic only)."""
    out = []
    for actions in itertools.product(range(mdp.n_actions), repeat=mdp.horizon):
        states = rollout_states(mdp, s0, actions)
        out.append(TabularTrajectory(states[:-1], tuple(actions)))
    return out


def preference_cross_entropy(delta: float, y: tuple[float, float]) -> float:
    """Cross-entropy between label y and (sigmoid(delta), 1 - sigmoid(delta))."""
    return float(y[0] * softplus(-delta) + y[1] * softplus(delta))


def exact_dipper_objective(pairs: Sequence[TabularPair], log_pi: np.ndarray, beta: float,
                           lam: float, v_l: np.ndarray, v_l_star: np.ndarray) -> float:
    """Preference loss with the full per-step value gap lambda*(V - V*).

    log_pi is a (horizon, S, A) table of log-policy values; v_l and v_l_star
    are (S, A) tables. With v_l = 0 and v_l_star = V_m this reduces to the
    practical objective that adds +lambda * V_m differences, i.e. the form
    that drops V and replaces V* by its m-step approximation.
    """
    gap = v_l - v_l_star
    total = 0.0
    for pair in pairs:
        delta = 0.0
        for t, ((s1, a1), (s2, a2)) in enumerate(
                zip(zip(pair.tau1.states, pair.tau1.actions),
                    zip(pair.tau2.states, pair.tau2.actions))):
            delta += beta * (log_pi[t, s1, a1] - log_pi[t, s2, a2])
            delta -= lam * (gap[s1, a1] - gap[s2, a2])
        total += preference_cross_entropy(delta, pair.y)
    return total / len(pairs)


def policy_fixed_point_check(mdp: TabularMdp, beta: float, s0: int = 0,
                             log_pi: np.ndarray | None = None,
                             preference: str = "bradley_terry") -> float:
    """Norm of the expected preference-loss gradient for a tabular softmax policy.

    Preferences come from exact trajectory returns: with `bradley_terry`
    the label probability is sigmoid(score difference); with `uniform` every
    pair is labelled (0.5, 0.5). At the soft-optimal policy the implicit
    per-trajectory reward equals the true score up to a shared constant, so
    the expected gradient vanishes.
    """
    sol = soft_value_iteration(mdp, beta)
    if log_pi is None:
        log_pi = sol.log_pi
    trajectories = enumerate_trajectories(mdp, s0)
    if len(trajectories) > 256:
        raise ValueError("too many trajectories to enumerate pairs")
    pi = np.exp(log_pi)
    scores = [trajectory_return(mdp, tau.states, tau.actions) for tau in trajectories]

    def traj_grad(tau: TabularTrajectory) -> np.ndarray:
        g = np.zeros_like(log_pi)
        for t, (s, a) in enumerate(zip(tau.states, tau.actions)):
            g[t, s, a] += 1.0
            g[t, s, :] -= pi[t, s, :]
        return g

    def traj_logp(tau: TabularTrajectory) -> float:
        return float(sum(log_pi[t, s, a] for t, (s, a) in enumerate(zip(tau.states, tau.actions))))

    grads = [traj_grad(tau) for tau in trajectories]
    logps = [traj_logp(tau) for tau in trajectories]
    expected = np.zeros_like(log_pi)
    n_pairs = 0
    for i, j in itertools.permutations(range(len(trajectories)), 2):
        delta = beta * (logps[i] - logps[j])
        p_first = sigmoid(scores[i] - scores[j]) if preference == "bradley_terry" else 0.5
        # d(loss)/d(delta) averaged over the label distribution, times d(delta)/d(theta)
        expected += (sigmoid(delta) - p_first) * beta * (grads[i] - grads[j])
        n_pairs += 1
    return float(np.linalg.norm(expected / n_pairs))


def random_deterministic_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
                             horizon: int) -> TabularMdp:
    kernel = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            kernel[s, a, int(rng.integers(n_states))] = 1.0
    rewards = rng.normal(size=(n_states, n_actions))
    return TabularMdp(n_states, n_actions, horizon, kernel, rewards)


@dataclass
class OracleReport:
    """Outcome of the derivation-verification sweep, rendered as a text log."""

    n_mdps: int
    betas: tuple[float, ...]
    max_soft_identity_error: float
    max_policy_row_error: float
    max_bijection_residual: float
    max_telescoping_gap: float
    elapsed_s: float
    passed: bool

    def render(self) -> str:
        lines = [
            f"mdps={self.n_mdps} betas={list(self.betas)} elapsed_s={self.elapsed_s:.2f}",
            f"{'PASS' if self.max_soft_identity_error < 1e-12 else 'FAIL'} "
            f"soft-value identity (max error {self.max_soft_identity_error:.3e}, tol 1e-12)",
            f"{'PASS' if self.max_policy_row_error < 1e-12 else 'FAIL'} "
            f"policy rows sum to 1 (max error {self.max_policy_row_error:.3e}, tol 1e-12)",
            f"{'PASS' if self.max_bijection_residual < 1e-12 else 'FAIL'} "
            f"reward/Q bijection residual (max {self.max_bijection_residual:.3e}, tol 1e-12)",
            f"{'PASS' if self.max_telescoping_gap < 1e-10 else 'FAIL'} "
            f"telescoped-return gap (max {self.max_telescoping_gap:.3e}, tol 1e-10)",
            f"overall: {'PASS' if self.passed else 'FAIL'}",
        ]
        return "\n".join(lines)


def verify_derivations(n_mdps: int = 50, seed: int = 0,
                       betas: tuple[float, ...] = (0.1, 1.0, 10.0)) -> OracleReport:
    """Run every identity check over random deterministic MDPs, all trajectories."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    max_identity = 0.0
    max_rows = 0.0
    max_bijection = 0.0
    max_gap = 0.0
    for _ in range(n_mdps):
        n_states = int(rng.integers(2, 7))
        n_actions = int(rng.integers(2, 5))
        horizon = int(rng.integers(1, 6))
        mdp = random_deterministic_mdp(rng, n_states, n_actions, horizon)
        for beta in betas:
            sol = soft_value_iteration(mdp, beta)
            recon = beta * _logsumexp(sol.q / beta, axis=2)
            max_identity = max(max_identity, float(np.max(np.abs(recon - sol.v[:-1]))))
            max_rows = max(max_rows, float(np.max(np.abs(sol.pi.sum(axis=2) - 1.0))))
            max_bijection = max(max_bijection, check_bijection(mdp, sol))
            for actions in itertools.product(range(n_actions), repeat=horizon):
                _, _, gap = check_telescoping(mdp, sol, actions)
                max_gap = max(max_gap, gap)
    elapsed = time.perf_counter() - start
    passed = (max_identity < 1e-12 and max_rows < 1e-12
              and max_bijection < 1e-12 and max_gap < 1e-10)
    return OracleReport(n_mdps, betas, max_identity, max_rows, max_bijection,
                        max_gap, elapsed, passed)
