"""Small fully-connected building blocks shared by the oracle and BC baselines."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, gelu, matmul, relu, reshape, tanh

INIT_SCALE = 0.02

ACTIVATIONS = {"relu": relu, "gelu": gelu, "tanh": tanh}


def init_linear(params: dict, name: str, d_in: int, d_out: int, rng: np.random.Generator):
    params[f"{name}.w"] = Tensor(rng.normal(0.0, INIT_SCALE, (d_in, d_out)),
                                 requires_grad=True, name=f"{name}.w")
    params[f"{name}.b"] = Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.b")


def linear(x, params: dict, name: str):
    """Affine map over the last axis; flattens leading dims into one GEMM."""
    w = params[f"{name}.w"]
    b = params[f"{name}.b"]
    shape = x.data.shape
    flat = reshape(x, (-1, shape[-1]))
    out = add(matmul(flat, w), b)
    return reshape(out, shape[:-1] + (w.data.shape[1],))


def init_mlp(params: dict, prefix: str, sizes, rng: np.random.Generator):
    """sizes = (d_in, hidden..., d_out); layers named {prefix}.0, {prefix}.1, ..."""
    for i in range(len(sizes) - 1):
        init_linear(params, f"{prefix}.{i}", sizes[i], sizes[i + 1], rng)


def mlp_forward(x, params: dict, prefix: str, n_layers: int, out_tanh: bool = False,
                activation: str = "relu"):
    """MLP with the named hidden activation; optional tanh on the output layer."""
    act = ACTIVATIONS[activation]
    h = x
    for i in range(n_layers):
        h = linear(h, params, f"{prefix}.{i}")
        if i < n_layers - 1:
            h = act(h)
    return tanh(h) if out_tanh else h
