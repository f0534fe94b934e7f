import math
import os
import sys
import tempfile
import unittest
from dataclasses import replace
from unittest.mock import patch

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

# Add project root to sys.path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import diffcore as dc
from agent import (
    AgentConfig,
    ReplayBuffer,
    ShortTermActionMemory,
    SSPGAgent,
    Temperature,
    steady_state_pg_loss,
    temperature_update,
)
from btpolicy import BTPolicy, ChainHistory, simulate_chain, transition_sample
from critic import q_eval
from errors import ContractError, DimensionError


def affine_policy(mu_weight, mu_bias, log_std, squash=True):
    policy = BTPolicy.create(1, 1, (), np.random.default_rng(0), squash=squash)
    policy.params.params["w0"][:] = [[0.0, 0.0], [mu_weight, 0.0]]
    policy.params.params["b0"][:] = [mu_bias, log_std]
    return policy


def set_affine(store, mu_weight, mu_bias, log_std):
    store.params["w0"][:] = [[0.0, 0.0], [mu_weight, 0.0]]
    store.params["b0"][:] = [mu_bias, log_std]


def quadratic_q(goal):
    return lambda s, a: -dc.square(a - goal)


def small_agent(seed=0, **overrides):
    settings_ = dict(n_beliefs=16, hidden_widths=(16, 16), batch_size=32, random_steps=0, min_data=1)
    settings_.update(overrides)
    return SSPGAgent.create(AgentConfig(**settings_), 1, 1, np.random.default_rng(seed))


class TestShortTermActionMemory(unittest.TestCase):

    def test_underfilled_memory_pads_with_cube_samples(self):
        memory = ShortTermActionMemory(8, 2)
        memory.push(np.full((3, 2), 0.5))
        draw = memory.sample(6, np.random.default_rng(0))
        self.assertEqual(draw.shape, (6, 2))
        np.testing.assert_array_equal(draw[:3], 0.5)
        self.assertTrue(np.all(np.abs(draw[3:]) <= 1.0))

    def test_full_memory_samples_stored_beliefs(self):
        memory = ShortTermActionMemory(4, 1)
        memory.push(np.arange(6, dtype=float).reshape(-1, 1))
        np.testing.assert_array_equal(memory.contents()[:, 0], [2.0, 3.0, 4.0, 5.0])
        draw = memory.sample(4, np.random.default_rng(1))
        self.assertEqual(sorted(draw[:, 0]), [2.0, 3.0, 4.0, 5.0])

    def test_width_checked(self):
        with self.assertRaises(DimensionError):
            ShortTermActionMemory(4, 2).push(np.zeros((1, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.lists(st.integers(0, 30), max_size=15), st.integers(1, 40))
    def test_capacity_under_churn(self, capacity, pushes, draw):
        memory = ShortTermActionMemory(capacity, 1)
        rng = np.random.default_rng(0)
        for count in pushes:
            memory.push(rng.uniform(-1, 1, size=(count, 1)) if count else np.zeros((0, 1)))
            self.assertLessEqual(len(memory), capacity)
            self.assertEqual(memory.sample(draw, rng).shape, (draw, 1))


class TestReplayBuffer(unittest.TestCase):

    def test_fifo_eviction(self):
        buffer = ReplayBuffer(3, 1, 1)
        for i in range(5):
            buffer.push(np.zeros(1), np.zeros(1), float(i), np.zeros(1), True)
        self.assertEqual(len(buffer), 3)
        batch = buffer.sample(200, np.random.default_rng(0))
        self.assertEqual(set(batch.r.tolist()), {2.0, 3.0, 4.0})

    def test_empty_buffer(self):
        with self.assertRaises(ContractError):
            ReplayBuffer(3, 1, 1).sample(1, np.random.default_rng(0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 16), st.integers(0, 60))
    def test_capacity_under_churn(self, capacity, pushes):
        buffer = ReplayBuffer(capacity, 2, 1)
        for i in range(pushes):
            buffer.push(np.ones(2), np.zeros(1), float(i), np.ones(2), False)
        self.assertEqual(len(buffer), min(capacity, pushes))
        if pushes:
            batch = buffer.sample(10, np.random.default_rng(0))
            self.assertTrue(np.all(batch.r >= pushes - min(capacity, pushes)))


class TestTemperature(unittest.TestCase):

    def test_fixed_mode_never_changes(self):
        temp = Temperature(0.0, "fixed", -1.0, 0.1)
        self.assertEqual(temperature_update(temp, 5.0), temp)

    def test_high_entropy_lowers_alpha(self):
        temp = Temperature(0.0, "auto", -1.0, 0.1)
        self.assertLess(temperature_update(temp, -3.0).alpha, temp.alpha)

    def test_entropy_at_target_is_stationary(self):
        temp = Temperature(0.3, "auto", -1.0, 0.1)
        self.assertEqual(temperature_update(temp, 1.0).log_alpha, 0.3)

    def test_zero_alpha_only_when_fixed(self):
        self.assertEqual(Temperature(-math.inf, "fixed").alpha, 0.0)
        with self.assertRaises(ContractError):
            Temperature(-math.inf, "auto")


class TestAgentConfig(unittest.TestCase):

    def test_rejects_bad_values(self):
        for overrides in ({"threshold": 1.0}, {"backprop": "sideways"}, {"n_beliefs": 1}, {"policy_utd": 2}):
            with self.assertRaises(ContractError):
                AgentConfig(**overrides)

    def test_resolved_defaults(self):
        self.assertEqual(AgentConfig(n_beliefs=32).resolved_memory_size(), 32)
        self.assertEqual(AgentConfig(n_critics=1).resolved_beta(), 0.0)
        self.assertEqual(AgentConfig(n_critics=5).resolved_beta(), 0.75)


class TestPolicyGradient(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(20)
        self.s = np.zeros(1)

    def test_zero_horizon_is_single_step_reparameterization(self):
        policy = BTPolicy.create(1, 1, (8,), self.rng)
        seed = self.rng.uniform(-1, 1, size=(10, 1))
        noise = self.rng.standard_normal((1, 10, 1))
        result = steady_state_pg_loss(policy, quadratic_q(0.3), self.s, seed, 0, noise=noise)
        a0 = transition_sample(policy, self.s, seed, noise[0])
        self.assertAlmostEqual(float(result.loss.values), float(np.mean((a0 - 0.3) ** 2)), places=12)
        self.assertEqual(result.beliefs.shape, (1, 10, 1))

    def _check_finite_differences(self, mode, horizon):
        policy = BTPolicy.create(1, 1, (16, 16), np.random.default_rng(horizon))
        seed = self.rng.uniform(-0.9, 0.9, size=(6, 1))
        noise = self.rng.standard_normal((horizon + 1, 6, 1))
        frozen = policy.params.copy()

        def loss():
            return steady_state_pg_loss(
                policy, quadratic_q(0.4), self.s, seed, horizon, alpha=0.2, noise=noise, mode=mode,
                frozen_params=frozen,
            ).loss

        grads = policy.params.gradients(dc.backward(loss()))
        analytic = np.concatenate([grads[k].ravel() for k in sorted(grads)])
        numeric = np.concatenate([
            dc.finite_difference_gradient(lambda: float(loss().values), policy.params.params[k]).ravel()
            for k in sorted(grads)
        ])
        rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
        self.assertLessEqual(rel, 1e-4, f"{mode} H={horizon}: relative error {rel}")

    def test_local_mode_matches_finite_differences(self):
        for horizon in (1, 3, 6):
            self._check_finite_differences("local", horizon)

    def test_full_mode_matches_finite_differences(self):
        for horizon in (1, 3):
            self._check_finite_differences("full", horizon)

    def test_modes_agree_without_reasoning_steps(self):
        policy = BTPolicy.create(1, 1, (8,), self.rng)
        seed = self.rng.uniform(-1, 1, size=(5, 1))
        noise = self.rng.standard_normal((1, 5, 1))
        grads = {}
        for mode in ("local", "truncated_full", "full"):
            result = steady_state_pg_loss(policy, quadratic_q(0.0), self.s, seed, 0, noise=noise, mode=mode)
            grads[mode] = policy.params.gradients(dc.backward(result.loss))
        for key in grads["local"]:
            np.testing.assert_array_equal(grads["local"][key], grads["full"][key])
            np.testing.assert_array_equal(grads["local"][key], grads["truncated_full"][key])

    def test_noise_shape_checked(self):
        policy = BTPolicy.create(1, 1, (8,), self.rng)
        with self.assertRaises(DimensionError):
            steady_state_pg_loss(policy, quadratic_q(0.0), self.s, np.zeros((4, 1)), 2, noise=np.zeros((2, 4, 1)))

    def test_matches_linear_gaussian_steady_state_gradient(self):
        theta0, theta1, sigma = 0.3, 0.6, 0.4
        policy = affine_policy(theta1, theta0, np.log(sigma), squash=False)
        mu = theta0 / (1 - theta1)
        var = sigma**2 / (1 - theta1**2)
        expected_b = -2 * mu / (1 - theta1)
        expected_w = -2 * mu**2 / (1 - theta1) - 2 * theta1 * var / (1 - theta1**2)

        rng = np.random.default_rng(21)
        q = lambda s, a: -dc.square(a)
        estimates = []
        for _ in range(100):
            seed = mu + np.sqrt(var) * rng.standard_normal((1000, 1))
            result = steady_state_pg_loss(policy, q, self.s, seed, 150, rng=rng)
            grads = policy.params.gradients(dc.backward(result.loss))
            # the loss is the negated objective
            estimates.append([-grads["b0"][0], -grads["w0"][1, 0]])
        estimates = np.array(estimates)
        mean = estimates.mean(axis=0)
        stderr = estimates.std(axis=0, ddof=1) / np.sqrt(len(estimates))
        self.assertLess(abs(mean[0] - expected_b), 4 * stderr[0])
        self.assertLess(abs(mean[1] - expected_w), 4 * stderr[1])


class TestActing(unittest.TestCase):

    def setUp(self):
        self.s = np.zeros(1)

    def test_contracting_kernel_converges_near_its_fixed_point(self):
        agent = small_agent(n_beliefs=64, hidden_widths=())
        set_affine(agent.policy.params, 0.0, 0.5, -50.0)
        action, stats = agent.act(self.s, np.random.default_rng(0))
        self.assertTrue(stats.converged)
        self.assertLessEqual(stats.n_steps, 10)
        np.testing.assert_allclose(action, np.tanh(0.5), atol=0.05)
        self.assertAlmostEqual(agent.convergence.n_hat, 0.99 + 0.01 * stats.n_steps)
        self.assertEqual(len(agent.memory), 64)

    def test_random_exploration_first(self):
        agent = small_agent(random_steps=2)
        rng = np.random.default_rng(1)
        for _ in range(2):
            action, stats = agent.act(self.s, rng)
            self.assertTrue(stats.random)
            self.assertTrue(np.all(np.abs(action) <= 1.0))
        self.assertFalse(agent.act(self.s, rng)[1].random)
        self.assertFalse(agent.act(self.s, rng, explore=False)[1].random)

    def test_actions_stay_in_cube(self):
        agent = small_agent(seed=2)
        rng = np.random.default_rng(2)
        for _ in range(20):
            action, _ = agent.act(self.s, rng)
            self.assertTrue(np.all(np.abs(action) < 1.0))

    def test_stuck_chains_hit_the_cap_with_warning(self):
        agent = small_agent(n_max=8, hidden_widths=())
        agent.policy.squash = False
        set_affine(agent.policy.params, 1.0, 0.0, -5.0)
        with self.assertLogs("agent", level="WARNING"):
            _, stats = agent.act(self.s, np.random.default_rng(3))
        self.assertFalse(stats.converged)
        self.assertEqual(stats.n_steps, 8)

    def test_fixed_steps_and_evaluation_clipping(self):
        agent = small_agent(fixed_steps=3)
        self.assertEqual(agent.act(self.s, np.random.default_rng(4))[1].n_steps, 3)
        self.assertEqual(agent.act(self.s, np.random.default_rng(4), max_steps=2)[1].n_steps, 2)
        adaptive = small_agent()
        self.assertEqual(adaptive.act(self.s, np.random.default_rng(5), max_steps=1)[1].n_steps, 1)

    def test_steady_state_samples(self):
        agent = small_agent()
        samples = agent.sample_steady_state(self.s, 40, np.random.default_rng(6))
        self.assertEqual(samples.shape, (40, 1))

    def test_independent_draws_converge_at_two_steps(self):
        agent = small_agent(n_beliefs=256, hidden_widths=())
        set_affine(agent.policy.params, 0.0, 0.1, np.log(0.3))
        rng = np.random.default_rng(7)
        quick = 0
        for _ in range(50):
            _, stats = agent.act(self.s, rng)
            quick += stats.converged and stats.n_steps == 2 and stats.r_p < 1.1
        self.assertGreaterEqual(quick, 45)

    @patch("agent.grdiag.prefix_passes")
    def test_reasoning_keeps_the_shortest_passing_prefix(self, mock_passes):
        mock_passes.side_effect = lambda chain, state: (chain.shape[0] not in (3, 4), 1.0)
        agent = small_agent(hidden_widths=())
        agent.convergence = replace(agent.convergence, n_hat=6.0)
        _, stats = agent.act(self.s, np.random.default_rng(8))
        self.assertEqual(stats.n_steps, 2)
        self.assertEqual(stats.trace, [(6, 1.0), (2, 1.0)])

    @patch.object(SSPGAgent, "_reason")
    def test_memory_and_action_use_the_converged_step(self, mock_reason):
        agent = small_agent()
        levels = np.array([0.1, 0.2, 0.3, 0.4])
        steps = np.broadcast_to(levels[:, None, None], (4, 16, 1)).copy()
        chain = ChainHistory(self.s, np.zeros((16, 1)), steps, np.zeros_like(steps))
        mock_reason.return_value = (chain, 2, True, 1.0, [(4, 1.0), (2, 1.0)])
        action, stats = agent.act(self.s, np.random.default_rng(9))
        np.testing.assert_array_equal(action, [0.2])
        np.testing.assert_array_equal(agent.memory.contents(), 0.2)
        samples = agent.sample_steady_state(self.s, 20, np.random.default_rng(10))
        np.testing.assert_array_equal(samples, 0.2)


class TestLearning(unittest.TestCase):

    def _filled(self, agent, rng, reward=lambda a: 0.0, count=64):
        s = np.zeros(1)
        for _ in range(count):
            a = rng.uniform(-1, 1, size=1)
            agent.buffer.push(s, a, reward(a), s, True)
        return agent

    def test_seeded_runs_are_identical(self):
        reports = []
        for _ in range(2):
            agent = self._filled(small_agent(seed=7), np.random.default_rng(7), reward=lambda a: -abs(a[0]))
            rng = np.random.default_rng(8)
            reports.append([agent.learn_step(agent.buffer.sample(32, rng), rng) for _ in range(3)])
        self.assertEqual(reports[0], reports[1])

    def test_zero_reward_drives_critic_to_zero(self):
        agent = self._filled(small_agent(seed=9, alpha=0.0, critic_lr=1e-2), np.random.default_rng(9))
        rng = np.random.default_rng(10)
        grid = np.linspace(-1, 1, 11)[:, None]
        for _ in range(200):
            report = agent.learn_step(agent.buffer.sample(32, rng), rng)
        self.assertTrue(math.isnan(report.mean_log_pi))
        self.assertLess(np.max(np.abs(q_eval(agent.critic, np.zeros(1), grid).aggregate)), 0.1)

    def test_policy_loss_leaves_critic_gradients_empty(self):
        agent = small_agent(seed=11, n_critics=2)
        result = agent.policy_gradient_loss(np.zeros(1), np.zeros((4, 1)), np.random.default_rng(0))
        grads = dc.backward(result.loss)
        self.assertTrue(grads)
        self.assertTrue(all(name.startswith("pi/") for name in grads))

    def test_critic_update_leaves_policy_alone(self):
        agent = self._filled(small_agent(seed=12), np.random.default_rng(12))
        before = agent.policy.params.copy()
        rng = np.random.default_rng(13)
        agent.learn_step(agent.buffer.sample(32, rng), rng, update_policy=False)
        for key, value in before.params.items():
            np.testing.assert_array_equal(value, agent.policy.params.params[key])

    def test_quadratic_bowl_pulls_steady_state_toward_goal(self):
        goal = 0.5
        policy = BTPolicy.create(1, 1, (16, 16), np.random.default_rng(14))
        s = np.zeros(1)
        rng = np.random.default_rng(15)

        def steady_mean():
            chain = simulate_chain(policy, s, np.zeros((256, 1)), 30, np.random.default_rng(16))
            return float(chain.final.mean())

        before = abs(steady_mean() - goal)
        for _ in range(300):
            seed = rng.uniform(-1, 1, size=(64, 1))
            result = steady_state_pg_loss(policy, quadratic_q(goal), s, seed, 3, rng=rng)
            dc.adam_step(policy.params, policy.params.gradients(dc.backward(result.loss)), lr=1e-2)
        self.assertLess(abs(steady_mean() - goal), before)
        self.assertLess(abs(steady_mean() - goal), 0.1)

    def test_vanishing_tail_of_term_gradients(self):
        agent = small_agent(seed=17, hidden_widths=(), alpha=0.0)
        set_affine(agent.policy.params, 0.5, 0.1, np.log(0.1))
        critic = agent.critic.members[0]
        critic.params["w0"][:] = [[0.0], [1.0]]
        critic.params["b0"][:] = 0.0
        norms = agent.term_gradient_norms(np.zeros(1), np.zeros((32, 1)), np.random.default_rng(18))
        self.assertEqual(len(norms), agent.horizon + 1)
        agent.convergence = replace(agent.convergence, n_hat=8.0)
        norms = agent.term_gradient_norms(np.zeros(1), np.zeros((32, 1)), np.random.default_rng(18))
        self.assertEqual(len(norms), 9)
        self.assertLess(norms[-1], 0.1 * norms[0])
        self.assertLess(norms[4], norms[0])

    def test_utd_schedule(self):
        agent = self._filled(small_agent(seed=19, utd=3, policy_utd=1), np.random.default_rng(19))
        before = agent.policy.params.step
        reports = agent.train_on_buffer(np.random.default_rng(20))
        self.assertEqual(len(reports), 3)
        self.assertEqual(agent.policy.params.step, before + 1)
        self.assertEqual(agent.critic.members[0].step, 3)


class TestAgentCheckpoint(unittest.TestCase):

    def test_restore_reproduces_acting_state(self):
        agent = small_agent(seed=21)
        rng = np.random.default_rng(22)
        for _ in range(3):
            agent.act(np.zeros(1), rng)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "agent.json")
            agent.save(path)
            stores, extra = dc.load_checkpoint(path)
        other = small_agent(seed=99).restore(stores, extra)
        np.testing.assert_array_equal(other.policy.params.params["w0"], agent.policy.params.params["w0"])
        np.testing.assert_array_equal(other.memory.contents(), agent.memory.contents())
        self.assertEqual(other.convergence.n_hat, agent.convergence.n_hat)
        a1, _ = agent.act(np.zeros(1), np.random.default_rng(5), memory_rng=np.random.default_rng(6))
        a2, _ = other.act(np.zeros(1), np.random.default_rng(5), memory_rng=np.random.default_rng(6))
        np.testing.assert_array_equal(a1, a2)


if __name__ == "__main__":
    unittest.main()
