"""Minimal offline value-learning agent used as the attack/perturbation oracle.

IQL-lite: an expectile-regression value function V, a one-step TD Q-function,
and a behavior-cloned deterministic policy. The attacks only need a
differentiable Q landscape and a deterministic policy, so there is no
advantage-weighted actor. All networks take normalized states; Q and the
policy take actions in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import fileformat
from .autodiff import AdamW, Tape, Tensor, add, backward, concat_last, mul, scale, sub, sum_all
from .data import OfflineDataset
from .nets import init_mlp, mlp_forward


class OracleTrainingError(RuntimeError):
    """Oracle optimization produced a non-finite loss."""


@dataclass
class OracleConfig:
    hidden: tuple = (128, 128)
    activation: str = "relu"
    expectile: float = 0.7
    discount: float = 0.99
    steps: int = 3000
    batch_size: int = 256
    lr: float = 3e-4
    weight_decay: float = 1e-4
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (128, 128)))
        return cls(**d)


@dataclass
class OracleBundle:
    params: dict          # q.*, v.*, policy.* tensors in one dict
    config: OracleConfig
    state_mean: np.ndarray
    state_std: np.ndarray
    d_s: int
    d_a: int
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.config.hidden) + 1

    @property
    def activation(self) -> str:
        return self.config.activation

    def normalize_states(self, x):
        return (np.asarray(x, dtype=np.float64) - self.state_mean) / self.state_std


def expectile_weights(residuals: np.ndarray, tau: float) -> np.ndarray:
    """|tau - 1(u < 0)|: tau on positive residuals, 1 - tau on negative."""
    return np.abs(tau - (np.asarray(residuals) < 0.0))


def _transitions(dataset: OfflineDataset):
    """Flatten trajectories into (s, a, r, s', done) arrays, states normalized."""
    s, a, r, s2, done = [], [], [], [], []
    for i, traj in enumerate(dataset.trajectories):
        ns = dataset.normalized_trajectory_states(i)
        t = len(traj)
        s.append(ns)
        a.append(traj.actions)
        r.append(traj.rewards)
        nxt = np.vstack([ns[1:], ns[-1:]])  # terminal next-state is a dummy
        s2.append(nxt)
        d = np.zeros(t)
        d[-1] = 1.0
        done.append(d)
    return (np.concatenate(s), np.concatenate(a), np.concatenate(r),
            np.concatenate(s2), np.concatenate(done))


def init_oracle_params(d_s: int, d_a: int, config: OracleConfig, rng) -> dict:
    params: dict = {}
    h = config.hidden
    init_mlp(params, "q", (d_s + d_a, *h, 1), rng)
    init_mlp(params, "v", (d_s, *h, 1), rng)
    init_mlp(params, "policy", (d_s, *h, d_a), rng)
    return params


def train_oracle(dataset: OfflineDataset, config: OracleConfig | None = None,
                 rng: np.random.Generator | None = None) -> OracleBundle:
    """Fit V (expectile regression on Q), Q (one-step TD), and the BC policy.

    All three nets share one AdamW and update jointly each step; their
    parameter sets are disjoint so the updates do not interact.
    """
    config = config or OracleConfig()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if not dataset.trajectories:
        raise ValueError("oracle training needs at least one trajectory")

    s, a, r, s2, done = _transitions(dataset)
    m = len(s)
    d_s, d_a = dataset.d_s, dataset.d_a
    params = init_oracle_params(d_s, d_a, config, rng)
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    n_layers = len(config.hidden) + 1
    bsz = min(config.batch_size, m)

    for step in range(config.steps):
        idx = rng.integers(0, m, size=bsz)
        bs, ba, br, bs2, bdone = s[idx], a[idx], r[idx], s2[idx], done[idx]
        with Tape() as tape:
            sa = Tensor(np.concatenate([bs, ba], axis=1))
            q = mlp_forward(sa, params, "q", n_layers, activation=config.activation)
            v = mlp_forward(Tensor(bs), params, "v", n_layers, activation=config.activation)
            # V regresses onto detached Q with expectile-weighted squared error
            u = sub(Tensor(q.data.copy()), v)
            w = expectile_weights(u.data[:, 0], config.expectile)
            loss_v = sum_all(mul(mul(u, u), Tensor(w[:, None] / bsz)))
            # Q regresses onto the one-step TD target using detached V(s')
            v2 = mlp_forward(Tensor(bs2), params, "v", n_layers, activation=config.activation)
            target = br + config.discount * v2.data[:, 0] * (1.0 - bdone)
            dq = sub(Tensor(target[:, None]), q)
            loss_q = scale(sum_all(mul(dq, dq)), 1.0 / bsz)
            # deterministic policy is plain behavior cloning
            pa = mlp_forward(Tensor(bs), params, "policy", n_layers, out_tanh=True,
                             activation=config.activation)
            da = sub(pa, Tensor(ba))
            loss_pi = scale(sum_all(mul(da, da)), 1.0 / (bsz * d_a))
            loss = add(add(loss_v, loss_q), loss_pi)
        if not np.isfinite(loss.data):
            raise OracleTrainingError(f"non-finite oracle loss at step {step}")
        backward(loss, tape)
        opt.step()
        opt.zero_grad()

    return OracleBundle(params, config, dataset.state_mean.copy(),
                        dataset.state_std.copy(), d_s, d_a,
                        meta={"transitions": int(m)})


def q_value(bundle: OracleBundle, state: np.ndarray, action: np.ndarray,
            with_grads: bool = False):
    """Q(s, a) for normalized states; optionally also dQ/ds and dQ/da.

    Accepts single samples (d,) or batches (M, d); for batches the returned
    value is the per-sample vector and gradients are per-sample rows.
    """
    state = np.atleast_2d(np.asarray(state, dtype=np.float64))
    action = np.atleast_2d(np.asarray(action, dtype=np.float64))
    s = Tensor(state, requires_grad=with_grads)
    a = Tensor(action, requires_grad=with_grads)
    if with_grads:
        with Tape() as tape:
            q = mlp_forward(concat_last(s, a), bundle.params, "q", bundle.n_layers,
                            activation=bundle.activation)
            total = sum_all(q)
        backward(total, tape)
        return q.data[:, 0].squeeze(), s.grad.squeeze(), a.grad.squeeze()
    q = mlp_forward(concat_last(s, a), bundle.params, "q", bundle.n_layers,
                    activation=bundle.activation)
    return q.data[:, 0].squeeze()


def policy_action(bundle: OracleBundle, state: np.ndarray) -> np.ndarray:
    """Deterministic tanh-bounded policy action for normalized states."""
    state = np.asarray(state, dtype=np.float64)
    squeeze = state.ndim == 1
    out = mlp_forward(Tensor(np.atleast_2d(state)), bundle.params, "policy",
                      bundle.n_layers, out_tanh=True, activation=bundle.activation)
    return out.data[0] if squeeze else out.data


CHECKPOINT_KIND_ORACLE = "oracle_bundle"


def save_oracle(path, bundle: OracleBundle):
    config = {"oracle": bundle.config.to_dict(),
              "d_s": bundle.d_s, "d_a": bundle.d_a,
              "state_mean": bundle.state_mean.tolist(),
              "state_std": bundle.state_std.tolist(),
              "meta": bundle.meta}
    fileformat.save_weights(path, CHECKPOINT_KIND_ORACLE, config,
                            {k: t.data for k, t in bundle.params.items()})


def load_oracle(path) -> OracleBundle:
    kind, config, arrays = fileformat.load_weights(path)
    if kind != CHECKPOINT_KIND_ORACLE:
        raise ValueError(f"{path} holds a '{kind}' checkpoint, expected "
                         f"'{CHECKPOINT_KIND_ORACLE}'")
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return OracleBundle(params, OracleConfig.from_dict(config["oracle"]),
                        np.asarray(config["state_mean"], dtype=np.float64),
                        np.asarray(config["state_std"], dtype=np.float64),
                        config["d_s"], config["d_a"], config.get("meta", {}))
