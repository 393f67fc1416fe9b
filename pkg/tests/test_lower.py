import logging
import math

import numpy as np
import pytest

from dipper.core import EmptyBufferError, LowTransition, ReplayBuffer, Subgoal, features
from dipper.envs import MazeEnv, MazeSpec, generate_maze
from dipper.lower import (DiscreteSacAgent, ValueNet, actor_loss_and_grad, critic_loss_and_grad,
                          lower_reward, rollout_lower, sac_update, train_value,
                          value_loss_and_grad)
from dipper.nets import forward, log_softmax

from helpers import finite_diff, max_rel_err, open_state, with_flat


def make_agent(n_inputs=6, n_actions=5, hidden=(12,), alpha=0.05, gamma=0.9, seed=0,
               pi_lr=0.01, q_lr=0.01):
    return DiscreteSacAgent(n_inputs, n_actions, hidden, "tanh", alpha=alpha, gamma=gamma,
                            polyak=0.1, pi_lr=pi_lr, q_lr=q_lr, adam_beta1=0.9,
                            adam_beta2=0.999, rng=np.random.default_rng(seed))


def test_lower_reward_indicator():
    sg = Subgoal((2, 2))
    assert lower_reward(open_state((2, 2)), sg, 1.5) == 1
    assert lower_reward(open_state((3, 3)), sg, 1.5) == 1  # diagonal within 1.5
    assert lower_reward(open_state((0, 0)), sg, 1.5) == 0
    assert lower_reward(open_state((0, 2)), sg, 2.0) == 0  # distance^2 == epsilon^2


def test_act_seeded_reproducible():
    agent = make_agent()
    feats = np.zeros(6)
    draws_a = [agent.act(feats, np.random.default_rng(5)) for _ in range(10)]
    draws_b = [agent.act(feats, np.random.default_rng(5)) for _ in range(10)]
    assert draws_a == draws_b


def test_act_dominant_logit():
    agent = make_agent()
    # force a huge margin on action 3 through the final bias
    _, bias = agent.actor.layers[-1]
    bias[...] = 0.0
    bias[3] = 25.0
    rng = np.random.default_rng(0)
    assert all(agent.act(np.zeros(6), rng) == 3 for _ in range(200))


def test_act_greedy_tie_breaks_lowest_index():
    agent = make_agent()
    agent.actor.flat[...] = 0.0  # all logits equal
    assert agent.act(np.zeros(6), mode="greedy") == 0


def test_critic_loss_on_terminal_reward_one():
    agent = make_agent()
    agent.q1.flat[...] = 0.0
    agent.q2.flat[...] = 0.0
    agent.q1_target.flat[...] = 0.0
    agent.q2_target.flat[...] = 0.0
    feats = np.zeros((4, 6))
    losses = agent.update(feats, np.array([0, 1, 2, 3]), np.ones(4), feats, np.ones(4))
    # target is exactly 1 on terminal transitions and Q started at 0
    assert losses.critic == 1.0


def test_zero_rewards_zero_init_zero_critic_loss():
    agent = make_agent(alpha=0.0)
    for net in (agent.q1, agent.q2, agent.q1_target, agent.q2_target):
        net.flat[...] = 0.0
    feats = np.zeros((3, 6))
    losses = agent.update(feats, np.array([0, 1, 2]), np.zeros(3), feats, np.zeros(3))
    assert losses.critic == 0.0


def test_sac_bandit_converges_to_greedy_optimum():
    # one state, rewards (1, 0, 0, 0, 0): exact Q equals the reward table
    agent = make_agent(alpha=0.0, seed=3)
    feats = np.tile(np.array([0.5, -0.5, 0.25, 0.0, 1.0, -1.0]), (5, 1))
    actions = np.arange(5)
    rewards = np.array([1.0, 0.0, 0.0, 0.0, 0.0])
    dones = np.ones(5)
    for _ in range(400):
        agent.update(feats, actions, rewards, feats, dones)
    assert agent.act(feats[0], mode="greedy") == 0
    q, _ = forward(agent.q1, feats[0])
    assert np.allclose(q, rewards, atol=0.02)


def test_sac_update_featurizes_transitions():
    agent = make_agent(n_inputs=features(open_state((0, 0)), (0, 0)).size)
    sg = Subgoal((1, 1))
    batch = [LowTransition(open_state((0, 0)), sg, 2, 1, open_state((1, 1)), True)
             for _ in range(3)]
    losses = sac_update(agent, batch)
    assert math.isfinite(losses.critic) and math.isfinite(losses.actor)
    with pytest.raises(ValueError):
        sac_update(agent, [])


def test_critic_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    agent = make_agent()
    feats = rng.normal(size=(5, 6))
    actions = rng.integers(0, 5, size=5)
    targets = rng.normal(size=5)

    def loss_fn(flat):
        return critic_loss_and_grad(with_flat(agent.q1, flat), feats, actions, targets)[0]

    _, grad = critic_loss_and_grad(agent.q1, feats, actions, targets)
    assert max_rel_err(grad, finite_diff(loss_fn, agent.q1.flat.copy())) < 1e-5


def test_actor_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    agent = make_agent(alpha=0.07)
    feats = rng.normal(size=(5, 6))
    q_min = rng.normal(size=(5, 5))

    def loss_fn(flat):
        return actor_loss_and_grad(with_flat(agent.actor, flat), feats, q_min, 0.07)[0]

    _, grad = actor_loss_and_grad(agent.actor, feats, q_min, 0.07)
    assert max_rel_err(grad, finite_diff(loss_fn, agent.actor.flat.copy())) < 1e-5


def test_value_gradient_matches_finite_differences():
    rng = np.random.default_rng(10)
    value = ValueNet(6, (10,), "tanh", 0.01, 0.9, 0.999, rng)
    feats = rng.normal(size=(6, 6))
    targets = rng.normal(size=6)

    def loss_fn(flat):
        return value_loss_and_grad(with_flat(value.params, flat), feats, targets)[0]

    _, grad = value_loss_and_grad(value.params, feats, targets)
    assert max_rel_err(grad, finite_diff(loss_fn, value.params.flat.copy())) < 1e-5


def _value_feat_dim():
    return features(open_state((0, 0)), (0, 0)).size


def test_train_value_terminal_rewards_fixed_point():
    rng = np.random.default_rng(4)
    value = ValueNet(_value_feat_dim(), (16,), "tanh", 0.02, 0.9, 0.999, rng)
    buf = ReplayBuffer(64)
    sg = Subgoal((1, 1))
    for _ in range(16):
        buf.push(LowTransition(open_state((0, 0)), sg, 0, 1, open_state((1, 1)), True))
    train_value(value, buf, rng, 400, 16, gamma=0.9)
    pred = value.predict_one(features(open_state((0, 0)), sg.cell))
    assert abs(pred - 1.0) < 0.05


def test_train_value_chain_matches_dynamic_programming():
    # 3-cell corridor: s0 -> s1 -> s2(goal); reward on the final hop only
    gamma = 0.9
    rng = np.random.default_rng(6)
    value = ValueNet(_value_feat_dim(), (24,), "tanh", 0.01, 0.9, 0.999, rng)
    buf = ReplayBuffer(256)
    sg = Subgoal((2, 0))
    s = [open_state((i, 0), goal=(3, 3)) for i in range(3)]
    for _ in range(40):
        buf.push(LowTransition(s[0], sg, 3, 0, s[1], False))
        buf.push(LowTransition(s[1], sg, 3, 1, s[2], True))
    train_value(value, buf, rng, 600, 32, gamma=gamma)
    # exact fitted-value solution: V(s1) = 1, V(s0) = gamma
    assert abs(value.predict_one(features(s[1], sg.cell)) - 1.0) < 0.05
    assert abs(value.predict_one(features(s[0], sg.cell)) - gamma) < 0.05


def test_train_value_empty_buffer():
    value = ValueNet(6, (8,), "tanh", 0.01, 0.9, 0.999, np.random.default_rng(0))
    with pytest.raises(EmptyBufferError):
        train_value(value, ReplayBuffer(8), np.random.default_rng(0), 10, 8, 0.9)


def test_train_value_sanity_band_quiet(caplog):
    rng = np.random.default_rng(4)
    value = ValueNet(_value_feat_dim(), (8,), "tanh", 0.01, 0.9, 0.999, rng)
    buf = ReplayBuffer(32)
    sg = Subgoal((1, 1))
    for _ in range(8):
        buf.push(LowTransition(open_state((0, 0)), sg, 0, 1, open_state((1, 1)), True))
    with caplog.at_level(logging.WARNING):
        train_value(value, buf, rng, 50, 8, gamma=0.9)
    assert not caplog.records


def _corner_spec():
    return MazeSpec(7, 7, 3, 3, (1, 5, 1, 5), start=(0, 0), goal=(6, 6))


def test_rollout_immediate_success_one_transition():
    agent = make_agent(n_inputs=features(open_state((0, 0), 7, 7), (0, 0)).size)
    env = MazeEnv(_corner_spec(), budget=49)
    state = env.reset()
    transitions, achieved = rollout_lower(agent, env, state, Subgoal(state.position), 5,
                                          np.random.default_rng(0), epsilon=1.5)
    assert len(transitions) == 1
    assert transitions[0].reward == 1 and transitions[0].done


def test_rollout_unreachable_subgoal_full_window():
    agent = make_agent(n_inputs=features(open_state((0, 0), 7, 7), (0, 0)).size)
    env = MazeEnv(_corner_spec(), budget=49)
    state = env.reset()
    # goal corner is more than k+epsilon cells away: every reward is 0
    transitions, achieved = rollout_lower(agent, env, state, Subgoal((6, 6)), 3,
                                          np.random.default_rng(1), epsilon=1.5)
    assert len(transitions) == 3
    assert all(t.reward == 0 for t in transitions)


def test_rollout_seeded_determinism():
    def run(seed):
        agent = make_agent(n_inputs=features(open_state((0, 0), 7, 7), (0, 0)).size, seed=2)
        env = MazeEnv(_corner_spec(), budget=49)
        state = env.reset()
        transitions, achieved = rollout_lower(agent, env, state, Subgoal((5, 5)), 6,
                                              np.random.default_rng(seed))
        return [(t.action, t.next_state.position, t.reward) for t in transitions], achieved.position

    assert run(11) == run(11)


def test_rollout_rejects_zero_window():
    agent = make_agent()
    env = MazeEnv(_corner_spec(), budget=10)
    state = env.reset()
    with pytest.raises(ValueError):
        rollout_lower(agent, env, state, Subgoal((1, 1)), 0)


def test_polyak_moves_targets():
    agent = make_agent()
    before = agent.q1_target.flat.copy()
    feats = np.random.default_rng(0).normal(size=(4, 6))
    agent.update(feats, np.array([0, 1, 2, 3]), np.ones(4), feats, np.ones(4))
    assert not np.array_equal(agent.q1_target.flat, before)
    # target stays between old target and online params
    assert np.allclose(agent.q1_target.flat,
                       before + 0.1 * (agent.q1.flat - before), atol=1e-12)
