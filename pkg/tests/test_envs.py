"""Environments, dataset generation, reference constants, evaluation harness."""

import numpy as np
import pytest

from rdtlab.corruption import PerturbSpec
from rdtlab.data import REWARD_GRID
from rdtlab.envs import (EnvSpec, PointReach, SparseKey, evaluate, generate_dataset,
                         known_envs, load_env_spec, make_env, make_env_spec,
                         normalized_score, reference_returns, save_env_spec)


class TestPointReach:
    def test_zero_action_from_rest(self):
        env = PointReach()
        s = np.array([0.5, -0.25, 0.0, 0.0])
        s2, r, done = env.step(s, np.zeros(2))
        assert np.array_equal(s2[:2], s[:2])  # no velocity, no movement
        assert abs(r - (-np.linalg.norm(s[:2]))) <= REWARD_GRID
        assert not done

    def test_rewards_on_grid(self):
        env = PointReach()
        rng = np.random.default_rng(0)
        s = env.reset(rng)
        for _ in range(20):
            s, r, _ = env.step(s, rng.uniform(-1, 1, 2))
            assert r == round(r / REWARD_GRID) * REWARD_GRID

    def test_controller_beats_random_five_fold(self):
        rand_ret, expert_ret = reference_returns("pointreach")
        assert expert_ret > rand_ret
        # returns are negative; "5x better" means a 5x smaller magnitude
        assert abs(expert_ret) * 5 <= abs(rand_ret)

    def test_out_of_range_action_clipped(self):
        env = PointReach()
        s = np.array([0.0, 0.0, 0.0, 0.0])
        a_big, _, _ = env.step(s, np.array([10.0, -10.0]))
        a_clip, _, _ = env.step(s, np.array([1.0, -1.0]))
        assert np.array_equal(a_big, a_clip)


class TestSparseKey:
    def test_no_key_no_door_reward(self):
        env = SparseKey()
        rng = np.random.default_rng(1)
        total = 0.0
        s = env.reset(rng)
        for _ in range(env.horizon):
            s, r, done = env.step(s, np.array([-1.0, 0.2]))  # away from the key
            total += r
            if done:
                break
        assert total <= 1.0

    def test_key_then_door_pays_two_and_ends(self):
        env = SparseKey()
        rng = np.random.default_rng(2)
        s = env.reset(rng)
        total = 0.0
        for _ in range(env.horizon):
            s, r, done = env.step(s, env.controller(s))
            total += r
            if done:
                break
        assert total == 2.0 and done

    def test_key_reward_paid_once(self):
        env = SparseKey()
        rng = np.random.default_rng(3)
        s = env.reset(rng)
        rewards = []
        for _ in range(env.horizon):
            # drive at the key forever
            target = env.key_pos
            a = np.clip(4 * (target - s[0:2]) - 4 * s[2:4], -1, 1)
            s, r, done = env.step(s, a)
            rewards.append(r)
        assert sum(rewards) == 1.0

    def test_state_layout(self):
        env = SparseKey()
        s = env.reset(np.random.default_rng(4))
        assert s.shape == (6,)
        assert s[4] == 0.0  # no key at start
        assert abs(s[5] - np.linalg.norm(s[0:2] - env.key_pos)) < 1e-12


class TestEnvRegistry:
    def test_known_envs(self):
        assert known_envs() == ["pointreach", "sparsekey"]
        with pytest.raises(ValueError, match="unknown environment"):
            make_env("walker2d")

    def test_spec_round_trip(self, tmp_path):
        spec = make_env_spec("sparsekey")
        path = tmp_path / "spec.json"
        save_env_spec(spec, path)
        assert load_env_spec(path) == spec

    def test_normalized_score_endpoints(self):
        spec = make_env_spec("pointreach")
        assert normalized_score(spec.random_return, spec) == 0.0
        assert normalized_score(spec.expert_return, spec) == 100.0

    def test_reference_constants_deterministic(self):
        import rdtlab.envs as envs_mod
        a = reference_returns("pointreach")
        envs_mod._REFERENCE_CACHE.clear()
        b = reference_returns("pointreach")
        assert a == b


class TestGenerateDataset:
    def test_expert_beats_medium_replay(self):
        rng = np.random.default_rng(5)
        mr = generate_dataset("pointreach", "medium_replay", 5000, rng)
        ex = generate_dataset("pointreach", "expert", 5000, rng)
        mr_returns = [t.rewards.sum() for t in mr.trajectories]
        ex_returns = [t.rewards.sum() for t in ex.trajectories]
        assert np.mean(ex_returns) > np.mean(mr_returns)

    def test_size_within_one_horizon(self):
        rng = np.random.default_rng(6)
        for name in ("pointreach", "sparsekey"):
            ds = generate_dataset(name, "medium_replay", 3000, rng)
            total = ds.total_steps()
            assert 3000 <= total < 3000 + make_env(name).horizon

    def test_medium_replay_diversity(self):
        rng = np.random.default_rng(7)
        mr = generate_dataset("pointreach", "medium_replay", 20000, rng)
        ex = generate_dataset("pointreach", "expert", 20000, rng)
        mr_iqr = np.subtract(*np.percentile([t.rewards.sum() for t in mr.trajectories],
                                            [75, 25]))
        ex_iqr = np.subtract(*np.percentile([t.rewards.sum() for t in ex.trajectories],
                                            [75, 25]))
        assert mr_iqr >= 3 * ex_iqr

    def test_deterministic_under_seed(self):
        a = generate_dataset("sparsekey", "medium_replay", 2000,
                             np.random.default_rng(8))
        b = generate_dataset("sparsekey", "medium_replay", 2000,
                             np.random.default_rng(8))
        for ta, tb in zip(a.trajectories, b.trajectories):
            assert np.array_equal(ta.states, tb.states)
            assert np.array_equal(ta.actions, tb.actions)
            assert np.array_equal(ta.rewards, tb.rewards)

    def test_too_few_transitions_rejected(self):
        with pytest.raises(ValueError):
            generate_dataset("pointreach", "expert", 50, np.random.default_rng(9))

    def test_metadata(self):
        ds = generate_dataset("pointreach", "expert", 500, np.random.default_rng(10))
        assert ds.meta["env"] == "pointreach"
        assert ds.meta["generation"] == "expert"


class _ScriptedPolicy:
    """Eval-interface adapter around a raw-state controller, for harness tests."""

    def __init__(self, env, state_mean, state_std, algorithm="scripted"):
        self._env = env
        self.state_dim = env.d_s
        self.state_mean = np.asarray(state_mean)
        self.state_std = np.asarray(state_std)
        self.algorithm = algorithm
        self.seen_states = []

    def start_episode(self):
        pass

    def select_action(self, state_norm, rtg, timestep):
        self.seen_states.append(state_norm.copy())
        raw = state_norm * self.state_std + self.state_mean
        return self._env.controller(raw)


class TestEvaluate:
    def make_policy(self, name="pointreach"):
        env = make_env(name)
        return _ScriptedPolicy(env, np.zeros(env.d_s), np.ones(env.d_s))

    def test_episode_count_and_determinism(self):
        spec = make_env_spec("pointreach")
        rep1 = evaluate(self.make_policy(), spec, episodes=10, target_return=0.0, seed=3)
        rep2 = evaluate(self.make_policy(), spec, episodes=10, target_return=0.0, seed=3)
        assert len(rep1.episode_returns) == 10
        assert rep1.episode_returns == rep2.episode_returns

    def test_zero_scale_perturbation_is_bitwise_clean(self):
        spec = make_env_spec("pointreach")
        clean = evaluate(self.make_policy(), spec, episodes=4, target_return=0.0, seed=5)
        pert = evaluate(self.make_policy(), spec, episodes=4, target_return=0.0,
                        perturb=PerturbSpec(kind="random", scale=0.0, seed=9), seed=5)
        assert clean.episode_returns == pert.episode_returns

    def test_returns_use_true_rewards_under_perturbation(self):
        # huge perturbation cannot inflate the reported return beyond what the
        # true environment paid out
        spec = make_env_spec("sparsekey")
        policy = self.make_policy("sparsekey")
        rep = evaluate(policy, spec, episodes=5, target_return=2.0,
                       perturb=PerturbSpec(kind="random", scale=3.0, seed=1), seed=2)
        assert all(0.0 <= r <= 2.0 for r in rep.episode_returns)

    def test_perturbation_actually_reaches_policy(self):
        spec = make_env_spec("pointreach")
        p1 = self.make_policy()
        evaluate(p1, spec, episodes=1, target_return=0.0, seed=4)
        p2 = self.make_policy()
        evaluate(p2, spec, episodes=1, target_return=0.0,
                 perturb=PerturbSpec(kind="random", scale=0.5, seed=4), seed=4)
        assert not np.array_equal(p1.seen_states[0], p2.seen_states[0])

    def test_action_diff_needs_oracle_policy(self):
        spec = make_env_spec("pointreach")
        with pytest.raises(ValueError, match="action_diff"):
            evaluate(self.make_policy(), spec, episodes=1, target_return=0.0,
                     perturb=PerturbSpec(kind="action_diff", scale=0.1), seed=0)

    def test_dimension_mismatch_rejected(self):
        spec = make_env_spec("sparsekey")
        with pytest.raises(ValueError, match="d_s"):
            evaluate(self.make_policy("pointreach"), spec, episodes=1,
                     target_return=0.0, seed=0)

    def test_report_fields(self):
        spec = make_env_spec("pointreach")
        rep = evaluate(self.make_policy(), spec, episodes=3, target_return=-5.0, seed=7)
        assert rep.env == "pointreach"
        assert rep.episodes == 3
        assert rep.target_return == -5.0
        assert rep.mean_return == pytest.approx(np.mean(rep.episode_returns))
        want = normalized_score(rep.mean_return, spec)
        assert rep.normalized_score == pytest.approx(want)
