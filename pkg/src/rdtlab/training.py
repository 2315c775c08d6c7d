"""Training loops for DT/RDT sequence policies and BC/RBC baselines.

The robust pieces beyond plain DT regression:
  * per-token Gaussian weights w = exp(-beta * delta^2) on detached errors,
  * running mean/variance of those errors per element (action, reward),
  * iterative data correction: tokens whose error z-score exceeds a threshold
    get their dataset entry permanently replaced by the model's eval-mode
    prediction (reward replacements repair return-to-go at the next sampling,
    because RTG is always recomputed from current rewards).

Errors use a per-dimension-mean convention throughout (squared errors are
averaged over action/reward dimensions), so the weight temperature means the
same thing regardless of action dimensionality.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict

import numpy as np

from . import fileformat
from .autodiff import AdamW, NonFiniteGradientError, Tape, Tensor, add, backward, mul, sub, sum_all, scale, sum_last
from .data import OfflineDataset, quantize_reward_trunc, sample_windows
from .model import (ModelConfig, NonFiniteActivationError, forward, init_params,
                    save_model)
from .nets import init_mlp, mlp_forward
from .perf import tune_allocator

ALGORITHMS = ("dt", "rdt", "bc", "rbc")
BC_HIDDEN = (256, 256)  # 3-layer MLP, width 256


class TrainingDivergedError(RuntimeError):
    """Loss or gradients went non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class TrainConfig:
    algorithm: str = "rdt"
    epochs: int = 100
    steps_per_epoch: int = 1000   # desk-scale experiments use 200
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta_action: float = 1.0      # Gaussian weight temperature for action errors
    beta_reward: float = 1.0
    zeta: float = 3.0             # correction threshold on the error z-score
    correction_start_epoch: int = 50
    correction_targets: tuple = ("action", "reward")
    threshold_mode: str = "normalized"  # "normalized": z > zeta; "literal": z > zeta*sigma
    eval_every: int = 0           # epochs between rollout evals; 0 disables
    eval_episodes: int = 10
    seed: int = 0

    def validate(self):
        problems = []
        if self.algorithm not in ALGORITHMS:
            problems.append(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.beta_action < 0 or self.beta_reward < 0:
            problems.append("beta_action and beta_reward must be >= 0")
        if self.zeta <= 0:
            problems.append(f"zeta must be > 0, got {self.zeta}")
        if self.correction_start_epoch > self.epochs:
            problems.append(f"correction_start_epoch {self.correction_start_epoch} "
                            f"exceeds epochs {self.epochs}")
        if self.threshold_mode not in ("normalized", "literal"):
            problems.append(f"threshold_mode must be 'normalized' or 'literal', "
                            f"got {self.threshold_mode!r}")
        bad = [t for t in self.correction_targets if t not in ("action", "reward")]
        if bad:
            problems.append(f"unknown correction targets {bad}")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            problems.append("epochs, steps_per_epoch and batch_size must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def to_dict(self):
        d = asdict(self)
        d["correction_targets"] = list(self.correction_targets)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "correction_targets" in d:
            d["correction_targets"] = tuple(d["correction_targets"])
        return cls(**d).validate()


class ErrorStats:
    """Streaming mean/variance (population) of prediction errors.

    Batches are folded in with Chan's parallel-update rule, which is the
    batched form of Welford's recurrence and stays within rounding error of a
    two-pass computation.
    """

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self._m2 = 0.0

    def update(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64).ravel()
        nb = values.size
        if nb == 0:
            return
        if not np.isfinite(values).all():
            raise ValueError("ErrorStats.update requires finite values")
        bmean = values.mean()
        bm2 = ((values - bmean) ** 2).sum()
        n = self.count
        total = n + nb
        delta = bmean - self.mean
        self.mean += delta * nb / total
        self._m2 += bm2 + delta * delta * n * nb / total
        self.count = total

    @property
    def variance(self) -> float:
        return self._m2 / self.count if self.count else 0.0

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))

    def snapshot(self) -> dict:
        return {"count": int(self.count), "mean": float(self.mean), "std": self.std}


def update_stats(stats: ErrorStats, deltas: np.ndarray) -> ErrorStats:
    stats.update(deltas)
    return stats


def gaussian_weights(deltas: np.ndarray, beta: float) -> np.ndarray:
    """w = exp(-beta * delta^2); detached by construction (plain numpy)."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    deltas = np.asarray(deltas, dtype=np.float64)
    if not np.isfinite(deltas).all():
        raise ValueError("gaussian_weights requires finite errors")
    return np.exp(-beta * deltas * deltas)


def _token_mse(preds, labels: np.ndarray, dims: int):
    """Per-token squared error averaged over dimensions; (B, K) Tensor."""
    err = sub(preds, Tensor(labels))
    return scale(sum_last(mul(err, err)), 1.0 / dims)


def _window_reduce(token_loss, coef: np.ndarray):
    """Weighted masked sum: mean over real tokens per window, mean over windows."""
    return sum_all(mul(token_loss, Tensor(coef)))


def _window_coef(mask: np.ndarray) -> np.ndarray:
    counts = mask.sum(axis=1, keepdims=True)
    return np.where(mask, 1.0, 0.0) / counts / mask.shape[0]


@dataclass
class LossResult:
    loss: object                  # scalar Tensor
    action_preds: object          # (B, K, d_a) Tensor
    reward_preds: object          # (B, K, 1) Tensor or None
    delta_action: np.ndarray      # (B, K) detached per-token errors
    delta_reward: np.ndarray | None
    weight_action: np.ndarray
    weight_reward: np.ndarray | None
    mask: np.ndarray


def dt_loss(batch, params, cfg: ModelConfig, train_mode: bool = True,
            rng: np.random.Generator | None = None):
    """Plain masked action regression: squared error averaged over dimensions,
    real tokens within each window, then windows."""
    if not batch.mask.any():
        raise ValueError("dt_loss: batch contains no real tokens")
    action_preds, _ = forward(batch, params, cfg, train_mode, rng)
    token = _token_mse(action_preds, batch.actions, batch.actions.shape[-1])
    return _window_reduce(token, _window_coef(batch.mask))


def rdt_loss(batch, params, cfg: ModelConfig, beta_action: float, beta_reward: float,
             train_mode: bool = True, rng: np.random.Generator | None = None,
             frozen_weights: tuple | None = None) -> LossResult:
    """Gaussian-weighted action (and optionally reward) regression.

    Per-token weights are exp(-beta * delta^2) with delta the detached
    root-mean-square prediction error, so no gradient flows through them.
    frozen_weights, when given as (w_action, w_reward), bypasses the weight
    computation; the finite-difference tests use it to probe the loss at
    fixed weights.
    """
    if not batch.mask.any():
        raise ValueError("rdt_loss: batch contains no real tokens")
    if beta_reward > 0 and not cfg.predict_rewards:
        raise ValueError("beta_reward > 0 requires a model with predict_rewards")
    action_preds, reward_preds = forward(batch, params, cfg, train_mode, rng)
    coef = _window_coef(batch.mask)

    token_a = _token_mse(action_preds, batch.actions, batch.actions.shape[-1])
    delta_a = np.sqrt(token_a.data)
    w_a = frozen_weights[0] if frozen_weights else gaussian_weights(delta_a, beta_action)
    loss = _window_reduce(token_a, w_a * coef)

    delta_r = w_r = None
    if cfg.predict_rewards:
        token_r = _token_mse(reward_preds, batch.rewards, 1)
        delta_r = np.sqrt(token_r.data)
        w_r = frozen_weights[1] if frozen_weights else gaussian_weights(delta_r, beta_reward)
        loss = add(loss, _window_reduce(token_r, w_r * coef))

    return LossResult(loss, action_preds, reward_preds, delta_a, delta_r,
                      w_a, w_r, batch.mask)


def correct_batch(dataset: OfflineDataset, batch, params, cfg: ModelConfig,
                  stats: dict, zeta: float, targets=("action", "reward"),
                  threshold_mode: str = "normalized"):
    """Replace outlier labels in the dataset with eval-mode model predictions.

    For each real token and each target element, the token's error z-score is
    computed against that element's running stats; tokens over the threshold
    get their dataset entry at (trajectory, step) overwritten. Returns
    (replacement count, list of replaced (trajectory, step, element) triples).
    """
    action_preds, reward_preds = forward(batch, params, cfg, train_mode=False)
    replaced = []
    count = 0
    for element in ("action", "reward"):
        if element not in targets:
            continue
        st = stats[element]
        if st.count == 0:
            raise ValueError(f"correction requires at least one observed {element} error")
        if st.std <= 1e-12 * max(1.0, abs(st.mean)):
            warnings.warn(f"degenerate {element} error stats (sigma ~ 0); "
                          f"correction skipped", RuntimeWarning)
            continue
        if element == "action":
            err = action_preds.data - batch.actions
            delta = np.sqrt((err * err).mean(axis=-1))
            preds = action_preds.data
        else:
            if reward_preds is None:
                continue  # no reward head, nothing to write back
            err = reward_preds.data - batch.rewards
            delta = np.sqrt((err * err).mean(axis=-1))
            preds = reward_preds.data
        z = (delta - st.mean) / st.std
        threshold = zeta * st.std if threshold_mode == "literal" else zeta
        flagged = batch.mask & (z > threshold)
        for b, k in np.argwhere(flagged):
            ti, si = batch.source[b, k]
            traj = dataset.trajectories[ti]
            if element == "action":
                traj.actions[si] = preds[b, k]
            else:
                # keep rewards on the grid so return sums stay exact
                traj.rewards[si] = quantize_reward_trunc(preds[b, k, 0])
            replaced.append((int(ti), int(si), element))
            count += 1
    return count, replaced


# ---------------------------------------------------------------------------
# BC / RBC baseline
# ---------------------------------------------------------------------------


class BCPolicy:
    """Single-state MLP policy; shares the eval interface of SequencePolicy."""

    def __init__(self, params, state_dim, action_dim, state_mean, state_std,
                 algorithm="bc"):
        self.params = params
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.state_mean = np.asarray(state_mean, dtype=np.float64)
        self.state_std = np.asarray(state_std, dtype=np.float64)
        self.algorithm = algorithm

    def start_episode(self):
        pass

    def select_action(self, state_norm, rtg, timestep):
        out = mlp_forward(Tensor(state_norm[None, :]), self.params, "bc",
                          len(BC_HIDDEN) + 1, out_tanh=True)
        return np.clip(out.data[0], -1.0, 1.0)


def bc_loss(states: np.ndarray, actions: np.ndarray, params, beta: float):
    """Behavior cloning with optional Gaussian weighting (RBC when beta > 0)."""
    preds = mlp_forward(Tensor(states), params, "bc", len(BC_HIDDEN) + 1, out_tanh=True)
    err = sub(preds, Tensor(actions))
    token = scale(sum_last(mul(err, err)), 1.0 / actions.shape[-1])
    delta = np.sqrt(token.data)
    w = gaussian_weights(delta, beta)
    loss = sum_all(mul(token, Tensor(w / len(states))))
    return loss, delta, w


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _epoch_record(epoch, losses, action_losses, reward_losses, w_mins, w_means,
                  replacements, stats, precision):
    rec = {"epoch": epoch,
           "loss": float(np.mean(losses)),
           "action_loss": float(np.mean(action_losses)) if action_losses else None,
           "reward_loss": float(np.mean(reward_losses)) if reward_losses else None,
           "weight_mean": float(np.mean(w_means)) if w_means else 1.0,
           "weight_min": float(np.min(w_mins)) if w_mins else 1.0,
           "replacements": int(replacements),
           "stats": {k: v.snapshot() for k, v in stats.items()}}
    if precision is not None:
        rec["correction_precision"] = precision
    return rec


def train(dataset: OfflineDataset, model_cfg: ModelConfig | None,
          train_cfg: TrainConfig, rng: np.random.Generator | None = None,
          corrupted_index: set | None = None, eval_hook=None):
    """Train one policy on the dataset; returns (policy, metrics records).

    corrupted_index, when given (ground truth from a corruption log), enables
    the per-epoch precision diagnostic of flagged corrections. eval_hook, when
    given, is called as eval_hook(policy, epoch_rng) on scheduled epochs and
    its float result is logged as eval_return.
    """
    tune_allocator()
    train_cfg.validate()
    alg = train_cfg.algorithm
    ss = np.random.SeedSequence(train_cfg.seed)
    init_ss, data_ss, eval_ss = ss.spawn(3)
    init_rng = np.random.default_rng(init_ss)
    data_rng = np.random.default_rng(data_ss) if rng is None else rng

    is_sequence = alg in ("dt", "rdt")
    if is_sequence:
        model_cfg.validate()
        if model_cfg.state_dim != dataset.d_s or model_cfg.action_dim != dataset.d_a:
            raise ValueError(f"model dims ({model_cfg.state_dim}, {model_cfg.action_dim}) "
                             f"do not match dataset ({dataset.d_s}, {dataset.d_a})")
        params = init_params(model_cfg, init_rng)
        policy = None
    else:
        params = {}
        init_mlp(params, "bc", (dataset.d_s, *BC_HIDDEN, dataset.d_a), init_rng)
        policy = BCPolicy(params, dataset.d_s, dataset.d_a,
                          dataset.state_mean, dataset.state_std, algorithm=alg)

    opt = AdamW(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    stats = {"action": ErrorStats(), "reward": ErrorStats()}
    track_stats = alg in ("rdt", "rbc")
    beta_a = train_cfg.beta_action if alg in ("rdt", "rbc") else 0.0
    beta_r = train_cfg.beta_reward if alg == "rdt" else 0.0
    records = []
    flagged_total: set = set()

    for epoch in range(train_cfg.epochs):
        losses, action_losses, reward_losses = [], [], []
        w_means, w_mins = [], []
        replacements = 0
        epoch_flagged: set = set()
        for _ in range(train_cfg.steps_per_epoch):
            if is_sequence:
                batch = sample_windows(dataset, train_cfg.batch_size,
                                       model_cfg.context, data_rng)
                with Tape() as tape:
                    result = rdt_loss(batch, params, model_cfg, beta_a, beta_r,
                                      train_mode=True, rng=data_rng)
                loss = result.loss
            else:
                batch = sample_windows(dataset, train_cfg.batch_size, 1, data_rng)
                states = batch.states[:, 0, :]
                actions = batch.actions[:, 0, :]
                with Tape() as tape:
                    loss, delta, w = bc_loss(states, actions, params, beta_a)
            if not np.isfinite(loss.data):
                if is_sequence:
                    # rerun with per-block checks to name the failing block
                    try:
                        forward(batch, params, model_cfg, train_mode=False,
                                check_finite=True)
                    except NonFiniteActivationError as exc:
                        raise TrainingDivergedError(
                            str(exc), {"epoch": epoch, "loss": float(loss.data)}) from exc
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}",
                    {"epoch": epoch, "loss": float(loss.data),
                     "stats": {k: v.snapshot() for k, v in stats.items()}})
            backward(loss, tape)
            try:
                opt.step()
            except NonFiniteGradientError as exc:
                raise TrainingDivergedError(
                    str(exc), {"epoch": epoch, "loss": float(loss.data)}) from exc
            opt.zero_grad()

            losses.append(float(loss.data))
            if is_sequence:
                m = result.mask
                action_losses.append(float((result.delta_action[m] ** 2).mean()))
                w_means.append(float(result.weight_action[m].mean()))
                w_mins.append(float(result.weight_action[m].min()))
                if result.delta_reward is not None:
                    reward_losses.append(float((result.delta_reward[m] ** 2).mean()))
                if track_stats:
                    update_stats(stats["action"], result.delta_action[m])
                    if result.delta_reward is not None:
                        update_stats(stats["reward"], result.delta_reward[m])
                if alg == "rdt" and epoch >= train_cfg.correction_start_epoch:
                    n, replaced = correct_batch(dataset, batch, params, model_cfg,
                                                stats, train_cfg.zeta,
                                                train_cfg.correction_targets,
                                                train_cfg.threshold_mode)
                    replacements += n
                    epoch_flagged.update(replaced)
            else:
                w_means.append(float(w.mean()))
                w_mins.append(float(w.min()))
                if track_stats:
                    update_stats(stats["action"], delta)

        precision = None
        if corrupted_index is not None and epoch_flagged:
            hits = sum(1 for t in epoch_flagged if t in corrupted_index)
            precision = hits / len(epoch_flagged)
            flagged_total.update(epoch_flagged)
        rec = _epoch_record(epoch, losses, action_losses, reward_losses,
                            w_mins, w_means, replacements, stats, precision)
        if eval_hook is not None and train_cfg.eval_every > 0 \
                and (epoch + 1) % train_cfg.eval_every == 0:
            if is_sequence:
                from .envs import SequencePolicy
                snapshot = SequencePolicy(params, model_cfg, dataset.state_mean,
                                          dataset.state_std, algorithm=alg)
            else:
                snapshot = policy
            rec["eval_return"] = float(eval_hook(snapshot,
                                                 np.random.default_rng(eval_ss.spawn(1)[0])))
        records.append(rec)

    if corrupted_index is not None and flagged_total:
        hits = sum(1 for t in flagged_total if t in corrupted_index)
        records[-1]["correction_precision_total"] = hits / len(flagged_total)

    if is_sequence:
        from .envs import SequencePolicy
        policy = SequencePolicy(params, model_cfg, dataset.state_mean,
                                dataset.state_std, algorithm=alg)
    return policy, records


# ---------------------------------------------------------------------------
# policy checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_KIND_BC = "bc_policy"


def save_policy(path, policy, extra: dict | None = None):
    """Serialize either policy kind with its normalizer baked in."""
    extra = dict(extra or {})
    extra["normalizer"] = {"state_mean": policy.state_mean.tolist(),
                           "state_std": policy.state_std.tolist()}
    extra["algorithm"] = policy.algorithm
    if isinstance(policy, BCPolicy):
        config = {"bc": {"state_dim": policy.state_dim, "action_dim": policy.action_dim,
                         "hidden": list(BC_HIDDEN)}}
        config.update(extra)
        fileformat.save_weights(path, CHECKPOINT_KIND_BC, config,
                                {k: t.data for k, t in policy.params.items()})
    else:
        save_model(path, policy.params, policy.cfg, extra)


def load_policy(path):
    """Returns (policy, extra-config dict) for either checkpoint kind."""
    kind, config, arrays = fileformat.load_weights(path)
    norm = config.get("normalizer")
    if norm is None:
        raise ValueError(f"{path} lacks a normalizer; cannot evaluate")
    mean = np.asarray(norm["state_mean"], dtype=np.float64)
    std = np.asarray(norm["state_std"], dtype=np.float64)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    algorithm = config.get("algorithm", "dt")
    if kind == CHECKPOINT_KIND_BC:
        bc = config["bc"]
        policy = BCPolicy(params, bc["state_dim"], bc["action_dim"], mean, std,
                          algorithm=algorithm)
    else:
        from .envs import SequencePolicy
        cfg = ModelConfig.from_dict(config["model"])
        policy = SequencePolicy(params, cfg, mean, std, algorithm=algorithm)
    extra = {k: v for k, v in config.items() if k not in ("model", "bc")}
    return policy, extra
