"""Goal-conditioned discrete max-entropy actor-critic and the subgoal value net.

The action space is small, so every expectation over actions is computed
exactly from the softmax policy (no sampling, no reparameterization). The
same agent class drives the primitive policy and, with a larger action set,
the subgoal-picking level of the vanilla hierarchical baseline.

Loss gradients are exposed as pure (params -> loss, grad) helpers so they can
be checked against finite differences directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import EmptyBufferError, GoalState, LowTransition, ReplayBuffer, Subgoal, features, sq_dist
from .envs import MazeEnv, N_ACTIONS
from .nets import (AdamState, MlpSpec, ParamTensor, adam_state, adam_step, backward,
                   forward, init_params, log_softmax)

logger = logging.getLogger(__name__)


def lower_reward(next_state: GoalState, subgoal: Subgoal, epsilon: float) -> int:
    """1 iff the squared distance to the subgoal is strictly below epsilon^2."""
    return 1 if sq_dist(next_state.position, subgoal.cell) < epsilon * epsilon else 0


def critic_loss_and_grad(params: ParamTensor, feats: np.ndarray, actions: np.ndarray,
                         targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error between Q(s, a) and fixed targets."""
    q, cache = forward(params, feats)
    rows = np.arange(len(actions))
    err = q[rows, actions] - targets
    loss = float(np.mean(err * err))
    upstream = np.zeros_like(q)
    upstream[rows, actions] = 2.0 * err / len(actions)
    return loss, backward(params, cache, upstream)


def actor_loss_and_grad(params: ParamTensor, feats: np.ndarray, q_min: np.ndarray,
                        alpha: float) -> tuple[float, np.ndarray]:
    """Exact-expectation policy loss E_pi[alpha * log pi - Q], Q held constant.

    d/d(logit_k) of a row's loss is pi_k * (f_k - E_pi[f]) with
    f = alpha * log pi - Q; the alpha term's direct dependence on the logits
    integrates to zero against the policy.
    """
    logits, cache = forward(params, feats)
    logp = log_softmax(logits)
    pi = np.exp(logp)
    f = alpha * logp - q_min
    row_loss = np.sum(pi * f, axis=1)
    loss = float(np.mean(row_loss))
    upstream = pi * (f - row_loss[:, None]) / len(row_loss)
    return loss, backward(params, cache, upstream)


def value_loss_and_grad(params: ParamTensor, feats: np.ndarray,
                        targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error of the scalar value head against fixed targets."""
    v, cache = forward(params, feats)
    err = v[:, 0] - targets
    loss = float(np.mean(err * err))
    upstream = (2.0 * err / len(err))[:, None]
    return loss, backward(params, cache, upstream)


@dataclass
class SacLosses:
    critic: float
    actor: float
    entropy: float


class DiscreteSacAgent:
    """Twin-critic soft actor-critic over a finite action set."""

    def __init__(self, n_inputs: int, n_actions: int, hidden_dims: tuple[int, ...],
                 activation: str, *, alpha: float, gamma: float, polyak: float,
                 pi_lr: float, q_lr: float, adam_beta1: float, adam_beta2: float,
                 rng: np.random.Generator):
        self.n_actions = n_actions
        self.alpha = alpha
        self.gamma = gamma
        self.polyak = polyak
        actor_spec = MlpSpec(n_inputs, hidden_dims, n_actions, activation)
        critic_spec = MlpSpec(n_inputs, hidden_dims, n_actions, activation)
        self.actor = init_params(actor_spec, rng)
        self.q1 = init_params(critic_spec, rng)
        self.q2 = init_params(critic_spec, rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.opt_actor = adam_state(self.actor, pi_lr, adam_beta1, adam_beta2)
        self.opt_q1 = adam_state(self.q1, q_lr, adam_beta1, adam_beta2)
        self.opt_q2 = adam_state(self.q2, q_lr, adam_beta1, adam_beta2)

    def action_logits(self, feats: np.ndarray) -> np.ndarray:
        out, _ = forward(self.actor, feats)
        return out

    def act(self, feats: np.ndarray, rng: np.random.Generator | None = None,
            mode: str = "sample", random_eps: float = 0.0) -> int:
        """Sample from the softmax policy, or take the argmax (ties -> lowest index)."""
        if mode == "greedy":
            return int(np.argmax(self.action_logits(feats)))
        assert rng is not None, "sampling requires an RNG"
        if random_eps > 0.0 and rng.random() < random_eps:
            return int(rng.integers(self.n_actions))
        p = np.exp(log_softmax(self.action_logits(feats)))
        return int(rng.choice(self.n_actions, p=p))

    def update(self, feats: np.ndarray, actions: np.ndarray, rewards: np.ndarray,
               next_feats: np.ndarray, dones: np.ndarray) -> SacLosses:
        """One gradient step on both critics and the actor, then a Polyak update."""
        next_logp = log_softmax(self.action_logits(next_feats))
        next_pi = np.exp(next_logp)
        q1_t, _ = forward(self.q1_target, next_feats)
        q2_t, _ = forward(self.q2_target, next_feats)
        q_next = np.minimum(q1_t, q2_t)
        v_next = np.sum(next_pi * (q_next - self.alpha * next_logp), axis=1)
        targets = rewards + self.gamma * (1.0 - dones) * v_next

        c1, g1 = critic_loss_and_grad(self.q1, feats, actions, targets)
        adam_step(self.opt_q1, self.q1, g1)
        c2, g2 = critic_loss_and_grad(self.q2, feats, actions, targets)
        adam_step(self.opt_q2, self.q2, g2)

        q1_now, _ = forward(self.q1, feats)
        q2_now, _ = forward(self.q2, feats)
        q_min = np.minimum(q1_now, q2_now)
        a_loss, ga = actor_loss_and_grad(self.actor, feats, q_min, self.alpha)
        adam_step(self.opt_actor, self.actor, ga)

        self.q1_target.flat += self.polyak * (self.q1.flat - self.q1_target.flat)
        self.q2_target.flat += self.polyak * (self.q2.flat - self.q2_target.flat)

        logp = log_softmax(self.action_logits(feats))
        entropy = float(np.mean(-np.sum(np.exp(logp) * logp, axis=1)))
        return SacLosses(critic=0.5 * (c1 + c2), actor=a_loss, entropy=entropy)


def transition_features(t: LowTransition) -> tuple[np.ndarray, np.ndarray]:
    return features(t.state, t.subgoal.cell), features(t.next_state, t.subgoal.cell)


def sac_update(agent: DiscreteSacAgent, batch: Sequence[LowTransition]) -> SacLosses:
    """Featurize a batch of primitive transitions and update the agent."""
    if not batch:
        raise ValueError("empty batch")
    pairs = [transition_features(t) for t in batch]
    feats = np.stack([p[0] for p in pairs])
    next_feats = np.stack([p[1] for p in pairs])
    actions = np.array([t.action for t in batch], dtype=np.int64)
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    dones = np.array([1.0 if t.done else 0.0 for t in batch])
    return agent.update(feats, actions, rewards, next_feats, dones)


class ValueNet:
    """Scalar estimate of the lower level's goal-reaching return for (state, subgoal)."""

    def __init__(self, n_inputs: int, hidden_dims: tuple[int, ...], activation: str,
                 lr: float, adam_beta1: float, adam_beta2: float, rng: np.random.Generator):
        self.params = init_params(MlpSpec(n_inputs, hidden_dims, 1, activation), rng)
        self.opt = adam_state(self.params, lr, adam_beta1, adam_beta2)

    def predict(self, feats: np.ndarray) -> np.ndarray:
        out, _ = forward(self.params, np.atleast_2d(feats))
        return out[:, 0]

    def predict_one(self, feats: np.ndarray) -> float:
        return float(self.predict(feats)[0])


def train_value(value: ValueNet, buffer: ReplayBuffer, rng: np.random.Generator,
                iterations: int, batch_size: int, gamma: float) -> float:
    """Fitted value iteration on stored transitions.

    Regression target is r + gamma * (1 - done) * V(next_state, subgoal) with
    the bootstrap term held constant per iteration. Returns the mean loss.
    After fitting, predictions outside the return range implied by indicator
    rewards are logged (not fatal).
    """
    if len(buffer) == 0:
        raise EmptyBufferError("value training needs a non-empty buffer")
    total = 0.0
    feats = None
    for _ in range(iterations):
        batch = buffer.sample(rng, min(batch_size, len(buffer)))
        pairs = [transition_features(t) for t in batch]
        feats = np.stack([p[0] for p in pairs])
        next_feats = np.stack([p[1] for p in pairs])
        rewards = np.array([t.reward for t in batch], dtype=np.float64)
        dones = np.array([1.0 if t.done else 0.0 for t in batch])
        targets = rewards + gamma * (1.0 - dones) * value.predict(next_feats)
        loss, grad = value_loss_and_grad(value.params, feats, targets)
        adam_step(value.opt, value.params, grad)
        total += loss
    preds = value.predict(feats)
    hi = 1.0 / (1.0 - gamma) + 0.1 if gamma < 1.0 else float("inf")
    if preds.min() < -0.1 or preds.max() > hi:
        logger.warning("value predictions outside sanity band [-0.1, %.2f]: min=%.3f max=%.3f",
                       hi, preds.min(), preds.max())
    return total / iterations


def rollout_lower(agent: DiscreteSacAgent, env: MazeEnv, state: GoalState, subgoal: Subgoal,
                  k_steps: int, rng: np.random.Generator | None = None, mode: str = "sample",
                  random_eps: float = 0.0, epsilon: float = 1.5,
                  ) -> tuple[list[LowTransition], GoalState]:
    """Execute up to k_steps primitive actions toward a subgoal.

    Stops early when the subgoal is achieved or the episode ends, and returns
    the transitions plus the state the window ended in.
    """
    if k_steps < 1:
        raise ValueError("window length must be >= 1")
    transitions: list[LowTransition] = []
    current = state
    for _ in range(k_steps):
        feats = features(current, subgoal.cell)
        action = agent.act(feats, rng, mode, random_eps)
        result = env.step(action)
        reward = lower_reward(result.next_state, subgoal, epsilon)
        done = bool(reward) or result.done
        transitions.append(LowTransition(current, subgoal, action, reward,
                                         result.next_state, done))
        current = result.next_state
        if done:
            break
    return transitions, current
