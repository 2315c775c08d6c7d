"""Train-time data corruption and test-time observation perturbations.

Random attacks add bounded uniform noise scaled by each dimension's standard
deviation over the dataset being attacked (rewards get plain bounded uniform
replacement). Adversarial attacks run projected gradient descent against a
pretrained value oracle: 100 steps of raw-gradient descent with step size
0.01 on a perturbation z clipped into [-eps, eps] after every update.

Everything here is a pure function of (dataset, spec, rng): the input dataset
is never mutated, and the same spec + seed reproduces the corrupted dataset
bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Tape, Tensor, add, backward, concat_last, mul, sum_all
from .data import OfflineDataset, quantize_reward_trunc
from .nets import mlp_forward
from .oracle import OracleBundle

VALID_ELEMENTS = ("state", "action", "reward")
REWARD_RANGE_FACTOR = 30.0  # random reward replacement is Uniform[-30*eps, 30*eps]
PGD_STEPS = 100
PGD_STEP_SIZE = 0.01


@dataclass(frozen=True)
class CorruptionSpec:
    elements: tuple
    mode: str            # "random" | "adversarial"
    rate: float          # fraction of timesteps attacked, per element
    scale: float         # per-dimension attack magnitude
    seed: int = 0

    def __post_init__(self):
        elements = tuple(self.elements)
        object.__setattr__(self, "elements", elements)
        if not elements or any(e not in VALID_ELEMENTS for e in elements):
            raise ValueError(f"elements must be a non-empty subset of {VALID_ELEMENTS}, "
                             f"got {elements}")
        if self.mode not in ("random", "adversarial"):
            raise ValueError(f"mode must be 'random' or 'adversarial', got {self.mode!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate must be in [0, 1], got {self.rate}")
        if self.scale < 0.0:
            raise ValueError(f"scale must be >= 0, got {self.scale}")

    def to_dict(self):
        d = asdict(self)
        d["elements"] = list(self.elements)
        return d


@dataclass(frozen=True)
class PerturbSpec:
    kind: str             # "random" | "action_diff"
    scale: float
    n_candidates: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("random", "action_diff"):
            raise ValueError(f"kind must be 'random' or 'action_diff', got {self.kind!r}")
        if self.scale < 0.0:
            raise ValueError(f"scale must be >= 0, got {self.scale}")
        if self.n_candidates < 1:
            raise ValueError(f"n_candidates must be >= 1, got {self.n_candidates}")

    def to_dict(self):
        return asdict(self)


def _select_steps(lengths: np.ndarray, count: int, rng: np.random.Generator):
    """Uniform sample of `count` (trajectory, step) pairs without replacement."""
    total = int(lengths.sum())
    flat = np.sort(rng.choice(total, size=count, replace=False))
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    ti = np.searchsorted(offsets, flat, side="right") - 1
    si = flat - offsets[ti]
    return ti.astype(np.int64), si.astype(np.int64)


def _attack_count(dataset: OfflineDataset, rate: float) -> int:
    return round(rate * dataset.total_steps())


def _log_entry(ti, si, element, old, new):
    old = np.atleast_1d(old)
    new = np.atleast_1d(new)
    return {"trajectory": int(ti), "step": int(si), "element": element,
            "old": old.tolist(), "new": new.tolist()}


def corrupt_random(dataset: OfflineDataset, spec: CorruptionSpec,
                   rng: np.random.Generator):
    """Bounded uniform attacks on the elements named in the spec.

    States/actions get s + lambda * std with lambda ~ Uniform[-eps, eps] per
    dimension (std computed over the dataset before modification); rewards are
    replaced by Uniform[-30*eps, 30*eps] draws. Exactly round(rate * total)
    timesteps are hit per element, selected independently per element.
    Returns (corrupted copy, log entries).
    """
    out = dataset.copy()
    lengths = out.lengths()
    count = _attack_count(out, spec.rate)
    eps = spec.scale
    std_s = out.all_states().std(axis=0)
    std_a = out.all_actions().std(axis=0)
    log = []
    for element in VALID_ELEMENTS:  # canonical order keeps rng use deterministic
        if element not in spec.elements or count == 0:
            continue
        ti, si = _select_steps(lengths, count, rng)
        if element == "state":
            lam = rng.uniform(-eps, eps, size=(count, out.d_s))
            for j in range(count):
                traj = out.trajectories[ti[j]]
                old = traj.states[si[j]].copy()
                new = np.clip(old + lam[j] * std_s, old - eps * std_s, old + eps * std_s)
                traj.states[si[j]] = new
                log.append(_log_entry(ti[j], si[j], element, old, new))
        elif element == "action":
            lam = rng.uniform(-eps, eps, size=(count, out.d_a))
            for j in range(count):
                traj = out.trajectories[ti[j]]
                old = traj.actions[si[j]].copy()
                new = np.clip(old + lam[j] * std_a, old - eps * std_a, old + eps * std_a)
                traj.actions[si[j]] = new
                log.append(_log_entry(ti[j], si[j], element, old, new))
        else:
            draws = quantize_reward_trunc(
                rng.uniform(-REWARD_RANGE_FACTOR * eps, REWARD_RANGE_FACTOR * eps, size=count))
            for j in range(count):
                traj = out.trajectories[ti[j]]
                old = traj.rewards[si[j]]
                traj.rewards[si[j]] = draws[j]
                log.append(_log_entry(ti[j], si[j], element, old, draws[j]))
    return out, log


def _pgd_minimize_q(bundle: OracleBundle, states: np.ndarray, actions: np.ndarray,
                    std: np.ndarray, eps: float, attack_states: bool,
                    rng: np.random.Generator) -> np.ndarray:
    """Batched PGD: minimize Q over an elementwise ball around state or action.

    z starts uniform in [-eps, eps]^d and is clipped there after every raw
    gradient step; the perturbed element is base + z * std.
    """
    base = states if attack_states else actions
    z = Tensor(rng.uniform(-eps, eps, size=base.shape), requires_grad=True)
    std_c = Tensor(std)
    n_layers = bundle.n_layers
    # freeze the oracle so backward only propagates to z
    frozen = [(p, p.requires_grad) for p in bundle.params.values()]
    for p, _ in frozen:
        p.requires_grad = False
    try:
        for _ in range(PGD_STEPS):
            with Tape() as tape:
                perturbed = add(Tensor(base), mul(z, std_c))
                if attack_states:
                    x = concat_last(perturbed, Tensor(actions))
                else:
                    x = concat_last(Tensor(states), perturbed)
                q = mlp_forward(x, bundle.params, "q", n_layers,
                                activation=bundle.activation)
                total = sum_all(q)  # rows are independent, so batch grads are per-sample
            backward(total, tape)
            z.data -= PGD_STEP_SIZE * z.grad
            np.clip(z.data, -eps, eps, out=z.data)
            z.grad = None
    finally:
        for p, flag in frozen:
            p.requires_grad = flag
    hit = base + z.data * std
    return np.clip(hit, base - eps * std, base + eps * std)


def _corrupt_adversarial_sa(dataset: OfflineDataset, spec: CorruptionSpec,
                            oracle: OracleBundle, rng: np.random.Generator,
                            element: str):
    if oracle is None:
        raise ValueError(f"adversarial {element} corruption requires a trained oracle")
    out = dataset.copy()
    lengths = out.lengths()
    count = _attack_count(out, spec.rate)
    log = []
    if count == 0:
        return out, log
    ti, si = _select_steps(lengths, count, rng)
    raw_states = np.stack([out.trajectories[t].states[s] for t, s in zip(ti, si)])
    actions = np.stack([out.trajectories[t].actions[s] for t, s in zip(ti, si)])
    if element == "state":
        std = out.all_states().std(axis=0)
        # Q sees normalized states; the ball lives in raw units, and the two
        # agree because normalization is affine
        norm_states = out.normalize_states(raw_states)
        norm_std = std / out.state_std
        hit_norm = _pgd_minimize_q(oracle, norm_states, actions, norm_std,
                                   spec.scale, True, rng)
        hit = out.denormalize_states(hit_norm)
        hit = np.clip(hit, raw_states - spec.scale * std, raw_states + spec.scale * std)
        for j in range(count):
            traj = out.trajectories[ti[j]]
            log.append(_log_entry(ti[j], si[j], element, traj.states[si[j]].copy(), hit[j]))
            traj.states[si[j]] = hit[j]
    else:
        std = out.all_actions().std(axis=0)
        norm_states = out.normalize_states(raw_states)
        hit = _pgd_minimize_q(oracle, norm_states, actions, std, spec.scale, False, rng)
        for j in range(count):
            traj = out.trajectories[ti[j]]
            log.append(_log_entry(ti[j], si[j], element, traj.actions[si[j]].copy(), hit[j]))
            traj.actions[si[j]] = hit[j]
    return out, log


def corrupt_adversarial_state(dataset, spec, oracle, rng):
    """PGD state attack: minimize Q(s + z*std(s), a) within the eps ball."""
    return _corrupt_adversarial_sa(dataset, spec, oracle, rng, "state")


def corrupt_adversarial_action(dataset, spec, oracle, rng):
    """PGD action attack: minimize Q(s, a + z*std(a)) within the eps ball."""
    return _corrupt_adversarial_sa(dataset, spec, oracle, rng, "action")


def corrupt_adversarial_reward(dataset: OfflineDataset, spec: CorruptionSpec,
                               rng: np.random.Generator):
    """Flip and scale selected rewards: r -> -eps * r."""
    out = dataset.copy()
    count = _attack_count(out, spec.rate)
    log = []
    if count == 0:
        return out, log
    ti, si = _select_steps(out.lengths(), count, rng)
    for j in range(count):
        traj = out.trajectories[ti[j]]
        old = traj.rewards[si[j]]
        new = float(quantize_reward_trunc(-spec.scale * old))
        traj.rewards[si[j]] = new
        log.append(_log_entry(ti[j], si[j], "reward", old, new))
    return out, log


def corrupt(dataset: OfflineDataset, spec: CorruptionSpec,
            oracle: OracleBundle | None = None,
            rng: np.random.Generator | None = None):
    """Apply the spec end to end: attack, record provenance, refit normalization.

    Normalization statistics are refit on the corrupted data because that is
    all the learner ever sees. Returns (corrupted dataset, log entries).
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    log = []
    out = dataset
    if spec.mode == "random":
        out, log = corrupt_random(out, spec, rng)
    else:
        for element in VALID_ELEMENTS:
            if element not in spec.elements:
                continue
            if element == "state":
                out, entries = corrupt_adversarial_state(out, spec, oracle, rng)
            elif element == "action":
                out, entries = corrupt_adversarial_action(out, spec, oracle, rng)
            else:
                out, entries = corrupt_adversarial_reward(out, spec, rng)
            log.extend(entries)
    out.meta.setdefault("corruption", []).append(spec.to_dict())
    out.refit_normalizer()
    return out, log


def write_attack_log(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_attack_log(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def corrupted_index(entries) -> set:
    """(trajectory, step, element) triples present in an attack log."""
    return {(e["trajectory"], e["step"], e["element"]) for e in entries}


def perturb_observation(state: np.ndarray, spec: PerturbSpec,
                        policy=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Test-time perturbation of one normalized observation.

    random: uniform draw from the l-infinity ball of radius scale.
    action_diff: among n_candidates ball samples, return the one maximizing
    ||policy(s) - policy(s_hat)||^2; `policy` maps a normalized state to an
    action and is required for this kind.
    """
    state = np.asarray(state, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    eps = spec.scale
    if spec.kind == "random":
        noise = rng.uniform(-eps, eps, size=state.shape)
        return np.clip(state + noise, state - eps, state + eps)
    if policy is None:
        raise ValueError("action_diff perturbation requires a deterministic policy")
    candidates = state + rng.uniform(-eps, eps, size=(spec.n_candidates,) + state.shape)
    candidates = np.clip(candidates, state - eps, state + eps)
    base_action = policy(state)
    gaps = [float(np.sum((base_action - policy(c)) ** 2)) for c in candidates]
    return candidates[int(np.argmax(gaps))]
