"""IQL-lite oracle: expectile loss, TD fixed points, policy regression, grads."""

import numpy as np
import pytest

from rdtlab.data import OfflineDataset, Trajectory, fit_normalizer
from rdtlab.oracle import (OracleConfig, expectile_weights, load_oracle,
                           policy_action, q_value, save_oracle, train_oracle)


def constant_dataset(rng, n_traj=8, t=15, action=None, reward=1.0):
    trajs = []
    for _ in range(n_traj):
        states = rng.normal(size=(t, 3))
        if action is None:
            actions = rng.uniform(-1, 1, (t, 2))
        else:
            actions = np.tile(action, (t, 1))
        trajs.append(Trajectory(states, actions, np.full(t, reward)))
    ds = OfflineDataset(trajs, np.zeros(3), np.ones(3), meta={"env": "test"})
    ds.state_mean, ds.state_std = fit_normalizer(ds)
    return ds


class TestExpectileWeights:
    def test_tau_half_is_symmetric_squared_error(self):
        u = np.array([-2.0, -0.1, 0.0, 0.3, 5.0])
        assert np.array_equal(expectile_weights(u, 0.5), np.full(5, 0.5))

    def test_asymmetry_at_point_seven(self):
        u = np.array([-1.0, 1.0, 2.0, -0.5])
        w = expectile_weights(u, 0.7)
        assert np.array_equal(w, np.abs(0.7 - np.array([1.0, 0.0, 0.0, 1.0])))
        assert np.allclose(w, [0.3, 0.7, 0.7, 0.3], atol=1e-15)


class TestTrainOracle:
    def test_gamma_zero_constant_reward_fixed_point(self):
        rng = np.random.default_rng(0)
        ds = constant_dataset(rng, reward=1.0)
        cfg = OracleConfig(discount=0.0, steps=1500, seed=1)
        bundle = train_oracle(ds, cfg)
        states = bundle.normalize_states(ds.all_states())
        actions = ds.all_actions()
        q = q_value(bundle, states, actions)
        assert np.abs(q - 1.0).max() < 0.05

    def test_single_action_policy_regression(self):
        rng = np.random.default_rng(1)
        target = np.array([0.4, -0.3])
        ds = constant_dataset(rng, action=target)
        bundle = train_oracle(ds, OracleConfig(steps=1500, seed=2))
        states = bundle.normalize_states(ds.all_states())
        acts = policy_action(bundle, states)
        assert np.abs(acts - target).max() < 0.01

    def test_empty_dataset_rejected(self):
        ds = constant_dataset(np.random.default_rng(2))
        ds.trajectories = []
        with pytest.raises(ValueError):
            train_oracle(ds, OracleConfig(steps=10))


class TestQValue:
    @pytest.fixture(scope="class")
    def bundle(self):
        rng = np.random.default_rng(3)
        ds = constant_dataset(rng)
        return train_oracle(ds, OracleConfig(steps=400, seed=3))

    def test_gradient_matches_finite_differences(self, bundle):
        from rdtlab.autodiff import numeric_gradient
        rng = np.random.default_rng(4)
        s = rng.normal(size=3)
        a = rng.uniform(-1, 1, 2)
        _, gs, ga = q_value(bundle, s, a, with_grads=True)

        num_s = numeric_gradient(lambda x: float(q_value(bundle, x, a)), s)
        num_a = numeric_gradient(lambda x: float(q_value(bundle, s, x)), a)
        for got, want in ((gs, num_s), (ga, num_a)):
            denom = np.maximum(1e-6, np.maximum(np.abs(got), np.abs(want)))
            assert np.max(np.abs(got - want) / denom) < 1e-4

    def test_deterministic(self, bundle):
        rng = np.random.default_rng(5)
        s = rng.normal(size=3)
        a = rng.uniform(-1, 1, 2)
        assert q_value(bundle, s, a) == q_value(bundle, s, a)

    def test_batch_matches_per_sample(self, bundle):
        rng = np.random.default_rng(6)
        s = rng.normal(size=(7, 3))
        a = rng.uniform(-1, 1, (7, 2))
        batched = q_value(bundle, s, a)
        singles = np.array([q_value(bundle, s[i], a[i]) for i in range(7)])
        # BLAS kernels differ slightly across batch shapes; allow float slack
        assert np.abs(batched - singles).max() < 1e-12


class TestPolicyAction:
    @pytest.fixture(scope="class")
    def bundle(self):
        rng = np.random.default_rng(7)
        ds = constant_dataset(rng)
        return train_oracle(ds, OracleConfig(steps=400, seed=4))

    def test_deterministic_and_bounded(self, bundle):
        rng = np.random.default_rng(8)
        s = rng.normal(size=3)
        a1 = policy_action(bundle, s)
        a2 = policy_action(bundle, s)
        assert np.array_equal(a1, a2)
        assert np.abs(a1).max() <= 1.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        ds = constant_dataset(rng, n_traj=3, t=8)
        bundle = train_oracle(ds, OracleConfig(steps=50, seed=5))
        path = tmp_path / "oracle.rdtw"
        save_oracle(path, bundle)
        loaded = load_oracle(path)
        assert loaded.config == bundle.config
        assert np.array_equal(loaded.state_mean, bundle.state_mean)
        s = rng.normal(size=3)
        a = rng.uniform(-1, 1, 2)
        assert q_value(loaded, s, a) == q_value(bundle, s, a)
        assert np.array_equal(policy_action(loaded, s), policy_action(bundle, s))
