"""Causal transformer policy over interleaved (return, state, action) tokens.

Each timestep contributes three tokens. Action predictions are read at state
tokens (so they see returns/states up to t and actions before t); reward
predictions are read at action tokens (seeing additionally a_t). The action
head is tanh-bounded because the environments use [-1, 1] actions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import fileformat
from .autodiff import (Tensor, add, embedding, gelu, interleave3, layer_norm,
                       matmul, mul, reshape, scale, softmax_causal, take_stride,
                       tanh, transpose)
from .data import SequenceBatch
from .nets import init_linear, linear


class NonFiniteActivationError(RuntimeError):
    """Forward pass produced nan/inf; message names the offending block."""


@dataclass
class ModelConfig:
    state_dim: int
    action_dim: int
    n_blocks: int = 3
    n_heads: int = 4
    embed_dim: int = 64
    context: int = 20
    max_timestep: int = 100
    embed_dropout: float = 0.1
    block_dropout: float = 0.0
    predict_rewards: bool = False
    condition_on_rtg: bool = True

    def validate(self):
        problems = []
        if self.embed_dim % self.n_heads != 0:
            problems.append(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.embed_dropout < 1.0:
            problems.append(f"embed_dropout must be in [0, 1), got {self.embed_dropout}")
        if not 0.0 <= self.block_dropout < 1.0:
            problems.append(f"block_dropout must be in [0, 1), got {self.block_dropout}")
        if self.context < 1:
            problems.append(f"context must be >= 1, got {self.context}")
        if self.max_timestep < 1:
            problems.append(f"max_timestep must be >= 1, got {self.max_timestep}")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d).validate()


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """GPT-style init: N(0, 0.02) weights, zero biases, unit layer-norm gains.

    Both heads are always allocated so checkpoints and init streams do not
    depend on the predict_rewards flag; an unused head simply never gets
    gradients.
    """
    p: dict[str, Tensor] = {}
    d = cfg.embed_dim
    init_linear(p, "embed_rtg", 1, d, rng)
    init_linear(p, "embed_state", cfg.state_dim, d, rng)
    init_linear(p, "embed_action", cfg.action_dim, d, rng)
    p["timestep_embed"] = Tensor(rng.normal(0.0, 0.02, (cfg.max_timestep, d)),
                                 requires_grad=True, name="timestep_embed")
    p["rtg_token"] = Tensor(rng.normal(0.0, 0.02, (d,)), requires_grad=True, name="rtg_token")
    for i in range(cfg.n_blocks):
        pre = f"block{i}"
        for ln in ("ln1", "ln2"):
            p[f"{pre}.{ln}.g"] = Tensor(np.ones(d), requires_grad=True, name=f"{pre}.{ln}.g")
            p[f"{pre}.{ln}.b"] = Tensor(np.zeros(d), requires_grad=True, name=f"{pre}.{ln}.b")
        for proj in ("wq", "wk", "wv", "wo"):
            init_linear(p, f"{pre}.attn.{proj}", d, d, rng)
        init_linear(p, f"{pre}.mlp.fc", d, 4 * d, rng)
        init_linear(p, f"{pre}.mlp.proj", 4 * d, d, rng)
    p["ln_f.g"] = Tensor(np.ones(d), requires_grad=True, name="ln_f.g")
    p["ln_f.b"] = Tensor(np.zeros(d), requires_grad=True, name="ln_f.b")
    init_linear(p, "action_head", d, cfg.action_dim, rng)
    init_linear(p, "reward_head", d, 1, rng)
    return p


def _dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: zeros with probability p, else 1/(1-p)."""
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def embed_tokens(batch, params, cfg: ModelConfig, train_mode: bool,
                 rng: np.random.Generator | None = None):
    """Project (rtg, state, action) and interleave into a (B, 3K, D) sequence.

    In train mode every embedding dimension is independently dropped with
    probability embed_dropout and survivors rescaled; masks are drawn per
    token, per element, per dimension. Returns (tokens, token_mask) where
    token_mask marks real (unpadded) tokens.
    """
    if batch.timesteps.max() >= cfg.max_timestep:
        raise ValueError(f"timestep {int(batch.timesteps.max())} out of range "
                         f"(max_timestep {cfg.max_timestep})")
    if train_mode and cfg.embed_dropout > 0.0 and rng is None:
        raise ValueError("train-mode embedding dropout needs an rng")
    bsz, k = batch.timesteps.shape
    d = cfg.embed_dim

    h_rtg = linear(Tensor(batch.rtg), params, "embed_rtg")
    if not cfg.condition_on_rtg:
        # learned constant token: predictions become independent of RTG values
        h_rtg = add(Tensor(np.zeros((bsz, k, d))), params["rtg_token"])
    h_state = linear(Tensor(batch.states), params, "embed_state")
    h_action = linear(Tensor(batch.actions), params, "embed_action")

    ts = embedding(params["timestep_embed"], batch.timesteps)
    h_rtg = add(h_rtg, ts)
    h_state = add(h_state, ts)
    h_action = add(h_action, ts)

    if train_mode and cfg.embed_dropout > 0.0:
        p = cfg.embed_dropout
        h_rtg = mul(h_rtg, Tensor(_dropout_mask((bsz, k, d), p, rng)))
        h_state = mul(h_state, Tensor(_dropout_mask((bsz, k, d), p, rng)))
        h_action = mul(h_action, Tensor(_dropout_mask((bsz, k, d), p, rng)))

    tokens = interleave3(h_rtg, h_state, h_action)
    token_mask = np.repeat(batch.mask, 3, axis=1)
    return tokens, token_mask


def _attention(x, params, prefix: str, cfg: ModelConfig, token_mask,
               train_mode: bool, rng):
    bsz, t, d = x.data.shape
    hd = d // cfg.n_heads
    q = linear(x, params, f"{prefix}.wq")
    k = linear(x, params, f"{prefix}.wk")
    v = linear(x, params, f"{prefix}.wv")

    def split_heads(z):
        return transpose(reshape(z, (bsz, t, cfg.n_heads, hd)), (0, 2, 1, 3))

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    weights = softmax_causal(scores, key_mask=token_mask)
    if train_mode and cfg.block_dropout > 0.0:
        weights = mul(weights, Tensor(_dropout_mask(weights.data.shape, cfg.block_dropout, rng)))
    ctx = matmul(weights, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, t, d))
    return linear(ctx, params, f"{prefix}.wo")


def forward(batch, params, cfg: ModelConfig, train_mode: bool = False,
            rng: np.random.Generator | None = None, check_finite: bool = False):
    """Run the transformer; returns (action_preds, reward_preds).

    action_preds: (B, K, d_a) Tensor read at state tokens, tanh-bounded.
    reward_preds: (B, K, 1) Tensor read at action tokens, or None when the
    reward head is disabled.
    """
    x, token_mask = embed_tokens(batch, params, cfg, train_mode, rng)
    for i in range(cfg.n_blocks):
        pre = f"block{i}"
        h = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        attn_out = _attention(h, params, f"{pre}.attn", cfg, token_mask, train_mode, rng)
        if train_mode and cfg.block_dropout > 0.0:
            attn_out = mul(attn_out, Tensor(_dropout_mask(attn_out.data.shape,
                                                          cfg.block_dropout, rng)))
        x = add(x, attn_out)
        h = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        mlp_out = linear(gelu(linear(h, params, f"{pre}.mlp.fc")), params, f"{pre}.mlp.proj")
        if train_mode and cfg.block_dropout > 0.0:
            mlp_out = mul(mlp_out, Tensor(_dropout_mask(mlp_out.data.shape,
                                                        cfg.block_dropout, rng)))
        x = add(x, mlp_out)
        if check_finite and not np.isfinite(x.data).all():
            raise NonFiniteActivationError(f"non-finite activations leaving block{i}")
    x = layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    state_out = take_stride(x, 1, 3)
    action_preds = tanh(linear(state_out, params, "action_head"))
    reward_preds = None
    if cfg.predict_rewards:
        reward_preds = linear(take_stride(x, 2, 3), params, "reward_head")
    if check_finite and not np.isfinite(action_preds.data).all():
        raise NonFiniteActivationError("non-finite activations in the action head")
    return action_preds, reward_preds


class RollingHistory:
    """Most recent (rtg, state, action) triples during a rollout.

    The action slot of the current step is a zero placeholder until
    complete_step() fills it; causal masking makes the placeholder invisible
    to the current action prediction.
    """

    def __init__(self, state_dim: int, action_dim: int):
        self.rtg: list[float] = []
        self.states: list[np.ndarray] = []
        self.actions: list[np.ndarray] = []
        self.timesteps: list[int] = []
        self._d_a = action_dim
        self._d_s = state_dim

    def __len__(self):
        return len(self.timesteps)

    def begin_step(self, rtg: float, state: np.ndarray, timestep: int):
        self.rtg.append(float(rtg))
        self.states.append(np.asarray(state, dtype=np.float64))
        self.actions.append(np.zeros(self._d_a))
        self.timesteps.append(int(timestep))

    def complete_step(self, action: np.ndarray):
        self.actions[-1] = np.asarray(action, dtype=np.float64)


def act(history: RollingHistory, params, cfg: ModelConfig) -> np.ndarray:
    """Deterministic eval-mode action for the latest state in the history."""
    if len(history) == 0:
        raise ValueError("act requires at least the current (rtg, state) in the history")
    k = cfg.context
    span = min(len(history), k)
    lo = k - span

    rtg = np.zeros((1, k, 1))
    states = np.zeros((1, k, cfg.state_dim))
    actions = np.zeros((1, k, cfg.action_dim))
    rewards = np.zeros((1, k, 1))
    timesteps = np.zeros((1, k), dtype=np.int64)
    mask = np.zeros((1, k), dtype=bool)
    source = np.full((1, k, 2), -1, dtype=np.int64)
    rtg[0, lo:, 0] = history.rtg[-span:]
    states[0, lo:] = np.stack(history.states[-span:])
    actions[0, lo:] = np.stack(history.actions[-span:])
    timesteps[0, lo:] = history.timesteps[-span:]
    mask[0, lo:] = True
    batch = SequenceBatch(rtg, states, actions, rewards, timesteps, mask, source)

    action_preds, _ = forward(batch, params, cfg, train_mode=False)
    return np.clip(action_preds.data[0, -1], -1.0, 1.0)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_KIND_SEQUENCE = "sequence_policy"


def save_model(path, params: dict[str, Tensor], cfg: ModelConfig, extra: dict | None = None):
    config = {"model": cfg.to_dict()}
    if extra:
        config.update(extra)
    fileformat.save_weights(path, CHECKPOINT_KIND_SEQUENCE, config,
                            {k: v.data for k, v in params.items()})


def load_model(path):
    """Returns (params, cfg, extra-config dict)."""
    kind, config, arrays = fileformat.load_weights(path)
    if kind != CHECKPOINT_KIND_SEQUENCE:
        raise ValueError(f"{path} holds a '{kind}' checkpoint, expected "
                         f"'{CHECKPOINT_KIND_SEQUENCE}'")
    cfg = ModelConfig.from_dict(config["model"])
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    extra = {k: v for k, v in config.items() if k != "model"}
    return params, cfg, extra
