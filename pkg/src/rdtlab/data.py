"""Trajectory storage, return-to-go, normalization, window sampling, file I/O.

Return-to-go values are plain suffix sums of the stored rewards, recomputed
at sampling time so that reward corruption (and later reward correction)
flows into the conditioning signal automatically.

All reward values produced inside this package live on a fixed binary grid
(multiples of 2^-20). On that grid every suffix sum is exact in float64, so
rtg[t] - rtg[t+1] == rewards[t] holds bitwise, which the correction machinery
relies on.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .fileformat import DATASET_MAGIC, FORMAT_VERSION, FormatError, Reader, Writer

# rewards are quantized to this lattice so return arithmetic stays exact
REWARD_GRID = 2.0 ** -20

STD_FLOOR = 1e-6


class EmptyDatasetError(ValueError):
    pass


def quantize_reward(x):
    """Round to the reward grid (nearest)."""
    return np.round(np.asarray(x, dtype=np.float64) / REWARD_GRID) * REWARD_GRID


def quantize_reward_trunc(x):
    """Round to the reward grid toward zero; never increases magnitude."""
    return np.trunc(np.asarray(x, dtype=np.float64) / REWARD_GRID) * REWARD_GRID


@dataclass
class Trajectory:
    """One episode: states (T, d_s), actions (T, d_a) in [-1, 1], rewards (T,)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        t = len(self.states)
        if t < 1 or len(self.actions) != t or len(self.rewards) != t:
            raise ValueError(f"trajectory arrays disagree on length: "
                             f"{len(self.states)}/{len(self.actions)}/{len(self.rewards)}")

    def __len__(self):
        return len(self.states)

    def copy(self) -> "Trajectory":
        return Trajectory(self.states.copy(), self.actions.copy(), self.rewards.copy())


@dataclass
class OfflineDataset:
    """Trajectory collection plus normalization stats and provenance metadata.

    This is the mutable object that iterative correction edits in place;
    states are never edited after normalization is fit, so the cached
    normalized view stays valid.
    """

    trajectories: list[Trajectory]
    state_mean: np.ndarray
    state_std: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.state_mean = np.asarray(self.state_mean, dtype=np.float64)
        self.state_std = np.asarray(self.state_std, dtype=np.float64)
        self._norm_states = None

    @property
    def d_s(self) -> int:
        return self.trajectories[0].states.shape[1]

    @property
    def d_a(self) -> int:
        return self.trajectories[0].actions.shape[1]

    def total_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def lengths(self) -> np.ndarray:
        return np.array([len(t) for t in self.trajectories], dtype=np.int64)

    def all_states(self) -> np.ndarray:
        return np.concatenate([t.states for t in self.trajectories], axis=0)

    def all_actions(self) -> np.ndarray:
        return np.concatenate([t.actions for t in self.trajectories], axis=0)

    def normalize_states(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.state_mean) / self.state_std

    def denormalize_states(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.state_std + self.state_mean

    def normalized_trajectory_states(self, i: int) -> np.ndarray:
        if self._norm_states is None:
            self._norm_states = [self.normalize_states(t.states) for t in self.trajectories]
        return self._norm_states[i]

    def refit_normalizer(self):
        self.state_mean, self.state_std = fit_normalizer(self)
        self._norm_states = None

    def max_return(self) -> float:
        return max(float(t.rewards.sum()) for t in self.trajectories)

    def copy(self) -> "OfflineDataset":
        return OfflineDataset([t.copy() for t in self.trajectories],
                              self.state_mean.copy(), self.state_std.copy(),
                              copy.deepcopy(self.meta))


@dataclass
class SequenceBatch:
    """B windows of K steps, left-padded with zeros at masked positions.

    source holds (trajectory index, step index) per position, -1 at pads, and
    is what correction uses to write model predictions back into the dataset.
    """

    rtg: np.ndarray        # (B, K, 1), current-reward suffix sums
    states: np.ndarray     # (B, K, d_s), normalized
    actions: np.ndarray    # (B, K, d_a)
    rewards: np.ndarray    # (B, K, 1), labels for the reward head
    timesteps: np.ndarray  # (B, K) int64
    mask: np.ndarray       # (B, K) bool, True = real token
    source: np.ndarray     # (B, K, 2) int64

    @property
    def batch_size(self) -> int:
        return self.rtg.shape[0]

    @property
    def context(self) -> int:
        return self.rtg.shape[1]


def compute_rtg(rewards: np.ndarray) -> np.ndarray:
    """Undiscounted suffix sums: out[t] = sum(rewards[t:])."""
    rewards = np.asarray(rewards, dtype=np.float64)
    return np.cumsum(rewards[::-1])[::-1].copy()


def fit_normalizer(dataset: OfflineDataset):
    """Per-dimension mean/std over every state of every trajectory.

    Fit on whatever data the learner actually sees (corrupted included); the
    std is floored so degenerate dimensions stay usable.
    """
    if not dataset.trajectories:
        raise EmptyDatasetError("cannot fit a normalizer on an empty dataset")
    states = dataset.all_states()
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    return mean, np.maximum(std, STD_FLOOR)


def sample_windows(dataset: OfflineDataset, batch_size: int, context: int,
                   rng: np.random.Generator) -> SequenceBatch:
    """Draw B windows: trajectory chosen proportional to length, end step uniform.

    Positions before the trajectory start are left-padded with zeros and
    masked out. RTG comes from the dataset's current rewards, so corrected
    rewards are reflected immediately.
    """
    if context < 1:
        raise ValueError("context must be >= 1")
    if not dataset.trajectories:
        raise EmptyDatasetError("cannot sample from an empty dataset")
    lengths = dataset.lengths()
    probs = lengths / lengths.sum()
    n = len(lengths)
    ti = rng.choice(n, size=batch_size, p=probs)
    te = rng.integers(0, lengths[ti])  # window end step, inclusive

    d_s, d_a = dataset.d_s, dataset.d_a
    rtg = np.zeros((batch_size, context, 1))
    states = np.zeros((batch_size, context, d_s))
    actions = np.zeros((batch_size, context, d_a))
    rewards = np.zeros((batch_size, context, 1))
    timesteps = np.zeros((batch_size, context), dtype=np.int64)
    mask = np.zeros((batch_size, context), dtype=bool)
    source = np.full((batch_size, context, 2), -1, dtype=np.int64)

    for b in range(batch_size):
        traj = dataset.trajectories[ti[b]]
        end = int(te[b])
        start = max(0, end - context + 1)
        span = end - start + 1
        lo = context - span  # left-pad count
        traj_rtg = compute_rtg(traj.rewards)
        rtg[b, lo:, 0] = traj_rtg[start:end + 1]
        states[b, lo:] = dataset.normalized_trajectory_states(ti[b])[start:end + 1]
        actions[b, lo:] = traj.actions[start:end + 1]
        rewards[b, lo:, 0] = traj.rewards[start:end + 1]
        timesteps[b, lo:] = np.arange(start, end + 1)
        mask[b, lo:] = True
        source[b, lo:, 0] = ti[b]
        source[b, lo:, 1] = np.arange(start, end + 1)

    return SequenceBatch(rtg, states, actions, rewards, timesteps, mask, source)


def subsample(dataset: OfflineDataset, ratio: float, rng: np.random.Generator) -> OfflineDataset:
    """Keep round(ratio * N) whole trajectories, chosen uniformly, at least one."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"subsample ratio must be in (0, 1], got {ratio}")
    n = len(dataset.trajectories)
    keep = max(1, round(ratio * n))
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    out = OfflineDataset([dataset.trajectories[i].copy() for i in idx],
                         dataset.state_mean.copy(), dataset.state_std.copy(),
                         copy.deepcopy(dataset.meta))
    out.meta["subsample"] = {"ratio": ratio, "kept": int(keep), "of": int(n)}
    out.refit_normalizer()
    return out


# ---------------------------------------------------------------------------
# RDT1 dataset file format
# ---------------------------------------------------------------------------


def dataset_file_size(n_traj: int, d_s: int, d_a: int, lengths, meta_len: int) -> int:
    """Exact byte size of an RDT1 file with the given geometry."""
    header = 4 + 4 + 4 + 4 + 4 + 4 + meta_len
    records = sum(4 + 8 * t * (d_s + d_a + 1) for t in lengths)
    return header + records


def save_dataset(dataset: OfflineDataset, path):
    """Write the RDT1 format; round-trips bit-exactly through load_dataset."""
    w = Writer()
    w.raw(DATASET_MAGIC)
    w.u32(FORMAT_VERSION)
    w.u32(len(dataset.trajectories))
    w.u32(dataset.d_s)
    w.u32(dataset.d_a)
    meta = dict(dataset.meta)
    meta["normalizer"] = {"state_mean": dataset.state_mean.tolist(),
                          "state_std": dataset.state_std.tolist()}
    w.json_blob(meta)
    for traj in dataset.trajectories:
        w.u32(len(traj))
        w.f64_array(traj.states)
        w.f64_array(traj.actions)
        w.f64_array(traj.rewards)
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def load_dataset(path) -> OfflineDataset:
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    r.expect_magic(DATASET_MAGIC)
    r.expect_version(FORMAT_VERSION)
    n = r.u32()
    d_s = r.u32()
    d_a = r.u32()
    meta = r.json_blob()
    trajectories = []
    for i in range(n):
        at = r.pos
        t = r.u32()
        if t < 1:
            raise FormatError(f"record {i}: zero-length trajectory", at)
        states = r.f64_array(t * d_s).reshape(t, d_s)
        actions = r.f64_array(t * d_a).reshape(t, d_a)
        rewards = r.f64_array(t)
        if not (np.isfinite(states).all() and np.isfinite(actions).all()
                and np.isfinite(rewards).all()):
            raise FormatError(f"record {i}: non-finite values", at)
        trajectories.append(Trajectory(states, actions, rewards))
    r.done()
    norm = meta.pop("normalizer", None)
    if norm is None:
        raise FormatError("metadata blob lacks a 'normalizer' entry", 20)
    if not trajectories:
        raise EmptyDatasetError(f"{path} holds no trajectories")
    return OfflineDataset(trajectories,
                          np.asarray(norm["state_mean"], dtype=np.float64),
                          np.asarray(norm["state_std"], dtype=np.float64),
                          meta)
