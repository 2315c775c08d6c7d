"""Toy continuous-control environments, dataset generation, and evaluation.

PointReach: a 2-d double integrator with mild damping; dense reward is the
negative distance to a fixed goal after each step.

SparseKey: the same integrator, but reward is 1.0 only on the first touch of
a key region and again on reaching the door while holding the key (which ends
the episode) -- a sparse-reward analog of kitchen-style tasks.

Both clip actions to [-1, 1] and quantize rewards to the shared reward grid
so that return arithmetic is exact (see data.REWARD_GRID).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict, field

import numpy as np

from .corruption import PerturbSpec, perturb_observation
from .data import OfflineDataset, Trajectory, fit_normalizer, quantize_reward
from .model import RollingHistory, act

logger = logging.getLogger("rdtlab")

ENV_SPEC_VERSION = 1

_DT = 0.1          # integrator time step
_DAMPING = 0.95    # velocity retained per step
# acceleration response; sized so value gradients w.r.t. actions are strong
# enough for the fixed-budget PGD attacks to bite
_ACCEL = 0.3
_RANDOM_REFERENCE_EPISODES = 1000
_EXPERT_REFERENCE_EPISODES = 100
_REFERENCE_SEED = 20240613  # fixed so reference constants are reproducible


@dataclass(frozen=True)
class EnvSpec:
    name: str
    d_s: int
    d_a: int
    horizon: int
    reward_kind: str
    dynamics_seed: int
    random_return: float
    expert_return: float
    version: int = ENV_SPEC_VERSION

    def to_dict(self):
        return asdict(self)


@dataclass
class EvalReport:
    env: str
    algorithm: str
    episodes: int
    target_return: float
    seed: int
    perturb: dict | None
    episode_returns: list
    mean_return: float
    std_return: float
    normalized_score: float
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def normalized_score(mean_return: float, spec: EnvSpec) -> float:
    """100 * (return - random) / (expert - random); 0 at random, 100 at expert."""
    return 100.0 * (mean_return - spec.random_return) / (spec.expert_return - spec.random_return)


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


class PointReach:
    """State [px, py, vx, vy]; action is 2-d acceleration; goal at the origin."""

    name = "pointreach"
    d_s = 4
    d_a = 2
    horizon = 100
    reward_kind = "dense"

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        pos = rng.uniform(-1.0, 1.0, size=2)
        return np.array([pos[0], pos[1], 0.0, 0.0])

    def step(self, state: np.ndarray, action: np.ndarray):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        vel = _DAMPING * state[2:4] + _ACCEL * a
        pos = state[0:2] + _DT * vel
        reward = float(quantize_reward(-np.linalg.norm(pos)))
        return np.concatenate([pos, vel]), reward, False

    def controller(self, state: np.ndarray) -> np.ndarray:
        # PD controller toward the goal
        return np.clip(-4.0 * state[0:2] - 4.0 * state[2:4], -1.0, 1.0)


class SparseKey:
    """State [px, py, vx, vy, has_key, dist_to_active_target].

    The agent must pass through the key region before the door counts; each of
    the two milestones pays 1.0 once, and the episode ends at the door.
    """

    name = "sparsekey"
    d_s = 6
    d_a = 2
    horizon = 100
    reward_kind = "sparse"

    key_pos = np.array([0.6, 0.6])
    door_pos = np.array([-0.6, -0.6])
    region_radius = 0.25

    def _full_state(self, pos, vel, has_key):
        target = self.door_pos if has_key else self.key_pos
        dist = np.linalg.norm(pos - target)
        return np.concatenate([pos, vel, [has_key, dist]])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        pos = rng.uniform(-0.2, 0.2, size=2)
        return self._full_state(pos, np.zeros(2), 0.0)

    def step(self, state: np.ndarray, action: np.ndarray):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        has_key = state[4] > 0.5
        vel = _DAMPING * state[2:4] + _ACCEL * a
        pos = state[0:2] + _DT * vel
        reward = 0.0
        done = False
        if not has_key and np.linalg.norm(pos - self.key_pos) <= self.region_radius:
            has_key = True
            reward = 1.0
        elif has_key and np.linalg.norm(pos - self.door_pos) <= self.region_radius:
            reward = 1.0
            done = True
        return self._full_state(pos, vel, float(has_key)), reward, done

    def controller(self, state: np.ndarray) -> np.ndarray:
        target = self.door_pos if state[4] > 0.5 else self.key_pos
        return np.clip(4.0 * (target - state[0:2]) - 4.0 * state[2:4], -1.0, 1.0)


_ENVS = {PointReach.name: PointReach, SparseKey.name: SparseKey}


def known_envs():
    return sorted(_ENVS)


def make_env(name: str):
    if name not in _ENVS:
        raise ValueError(f"unknown environment '{name}'; known: {', '.join(known_envs())}")
    return _ENVS[name]()


def _rollout(env, policy_fn, rng: np.random.Generator) -> Trajectory:
    """One episode under a raw-state policy; returns the recorded trajectory."""
    states, actions, rewards = [], [], []
    s = env.reset(rng)
    clip_warned = False
    for _ in range(env.horizon):
        a = np.asarray(policy_fn(s), dtype=np.float64)
        if not clip_warned and (np.abs(a) > 1.0).any():
            logger.warning("action out of range, clipping for the rest of the episode")
            clip_warned = True
        a = np.clip(a, -1.0, 1.0)
        s2, r, done = env.step(s, a)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        s = s2
        if done:
            break
    return Trajectory(np.stack(states), np.stack(actions), np.array(rewards))


_REFERENCE_CACHE: dict[str, tuple] = {}


def reference_returns(name: str):
    """(random_return, expert_return) Monte Carlo constants, frozen by seed."""
    if name in _REFERENCE_CACHE:
        return _REFERENCE_CACHE[name]
    env = make_env(name)
    rng = np.random.default_rng([_REFERENCE_SEED, len(name), env.d_s])
    rand_returns = []
    for _ in range(_RANDOM_REFERENCE_EPISODES):
        traj = _rollout(env, lambda s: rng.uniform(-1.0, 1.0, size=env.d_a), rng)
        rand_returns.append(traj.rewards.sum())
    expert_returns = []
    for _ in range(_EXPERT_REFERENCE_EPISODES):
        traj = _rollout(env, env.controller, rng)
        expert_returns.append(traj.rewards.sum())
    out = (float(np.mean(rand_returns)), float(np.mean(expert_returns)))
    _REFERENCE_CACHE[name] = out
    return out


def make_env_spec(name: str, dynamics_seed: int = 0) -> EnvSpec:
    env = make_env(name)
    random_return, expert_return = reference_returns(name)
    return EnvSpec(name=name, d_s=env.d_s, d_a=env.d_a, horizon=env.horizon,
                   reward_kind=env.reward_kind, dynamics_seed=dynamics_seed,
                   random_return=random_return, expert_return=expert_return)


def save_env_spec(spec: EnvSpec, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_env_spec(path) -> EnvSpec:
    with open(path, encoding="utf-8") as fh:
        return EnvSpec(**json.load(fh))


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def generate_dataset(name: str, kind: str, n_transitions: int,
                     rng: np.random.Generator) -> OfflineDataset:
    """Roll episodes until at least n_transitions steps are stored.

    medium_replay blends a uniform-random policy with the scripted controller,
    with the controller share annealing from 0 to 1 across the dataset --
    emulating the replay buffer of an improving agent. expert is the scripted
    controller plus small Gaussian action noise.
    """
    if kind not in ("medium_replay", "expert"):
        raise ValueError(f"unknown dataset kind '{kind}'")
    env = make_env(name)
    if n_transitions < env.horizon:
        raise ValueError(f"n_transitions must be at least one horizon ({env.horizon})")
    trajectories = []
    total = 0
    while total < n_transitions:
        if kind == "medium_replay":
            # controller share anneals 0 -> 1, slowly at first so early data
            # stays genuinely low-quality
            alpha = (total / n_transitions) ** 2

            def policy_fn(s, _a=alpha):
                if rng.random() < _a:
                    return env.controller(s)
                return rng.uniform(-1.0, 1.0, env.d_a)
        else:
            def policy_fn(s):
                return np.clip(env.controller(s) + 0.05 * rng.standard_normal(env.d_a),
                               -1.0, 1.0)
        traj = _rollout(env, policy_fn, rng)
        trajectories.append(traj)
        total += len(traj)
    ds = OfflineDataset(trajectories, np.zeros(env.d_s), np.ones(env.d_s),
                        meta={"env": name, "generation": kind,
                              "transitions": int(total)})
    ds.state_mean, ds.state_std = fit_normalizer(ds)
    return ds


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


class SequencePolicy:
    """Wraps trained transformer params for rollouts; states arrive normalized."""

    def __init__(self, params, cfg, state_mean, state_std, algorithm="dt"):
        self.params = params
        self.cfg = cfg
        self.state_mean = np.asarray(state_mean, dtype=np.float64)
        self.state_std = np.asarray(state_std, dtype=np.float64)
        self.algorithm = algorithm
        self._history = None

    @property
    def state_dim(self):
        return self.cfg.state_dim

    def start_episode(self):
        self._history = RollingHistory(self.cfg.state_dim, self.cfg.action_dim)

    def select_action(self, state_norm, rtg, timestep):
        self._history.begin_step(rtg, state_norm, timestep)
        a = act(self._history, self.params, self.cfg)
        self._history.complete_step(a)
        return a


def evaluate(policy, env_spec: EnvSpec, episodes: int, target_return: float,
             perturb: PerturbSpec | None = None, perturb_policy=None,
             rng: np.random.Generator | None = None, seed: int = 0) -> EvalReport:
    """Roll `episodes` episodes; returns are computed on true states and rewards.

    Observations may be perturbed before the policy sees them; the running
    return-to-go target is decremented by the observed (true) reward each step
    and floored at zero. action_diff perturbations need `perturb_policy`, a
    map from normalized state to action.
    """
    if policy.state_dim != env_spec.d_s:
        raise ValueError(f"model expects d_s={policy.state_dim} but environment "
                         f"'{env_spec.name}' has d_s={env_spec.d_s}")
    if perturb is not None and perturb.kind == "action_diff" and perturb_policy is None:
        raise ValueError("action_diff perturbation requires an oracle policy")
    env = make_env(env_spec.name)
    base_ss = np.random.SeedSequence([seed, env_spec.dynamics_seed]) if rng is None else None
    perturb_rng = (np.random.default_rng([perturb.seed, seed])
                   if perturb is not None else None)
    returns = []
    for ep in range(episodes):
        if base_ss is not None:
            ep_rng = np.random.default_rng(base_ss.spawn(1)[0])
        else:
            ep_rng = rng
        s = env.reset(ep_rng)
        policy.start_episode()
        rtg = float(target_return)
        ep_return = 0.0
        for t in range(env.horizon):
            s_norm = (s - policy.state_mean) / policy.state_std
            if perturb is not None:
                s_norm = perturb_observation(s_norm, perturb, perturb_policy, perturb_rng)
            a = policy.select_action(s_norm, rtg, t)
            s, r, done = env.step(s, a)
            ep_return += r
            rtg = max(rtg - r, 0.0)
            if done:
                break
        returns.append(ep_return)
    mean = float(np.mean(returns))
    return EvalReport(env=env_spec.name,
                      algorithm=getattr(policy, "algorithm", "unknown"),
                      episodes=episodes,
                      target_return=float(target_return),
                      seed=seed,
                      perturb=perturb.to_dict() if perturb is not None else None,
                      episode_returns=[float(r) for r in returns],
                      mean_return=mean,
                      std_return=float(np.std(returns)),
                      normalized_score=normalized_score(mean, env_spec))
