"""Dense float64 tensors with a dynamic reverse-mode tape and AdamW.

Deliberately small: only the primitives a small GPT and a few MLPs need.
Everything is float64, single-threaded per run, and deterministic under a
fixed seed, so analytic gradients can be checked against finite differences
at tight tolerances.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contained nan/inf; the whole update was rejected."""


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed primitives, replayed in reverse by backward().

    Records are appended in execution order, which is a topological order of
    the dynamically built graph, so a single reverse sweep propagates every
    adjoint exactly once.
    """

    def __init__(self):
        self.records = []  # (out_tensor, ((parent, pull_fn), ...))

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A float64 array plus optional gradient buffer.

    Tensors are treated as immutable once consumed by an op; only the
    optimizer mutates parameter data in place, between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_grad_owned")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def accumulate_grad(self, g):
        # adopt the first contribution without copying; arrays we did not
        # allocate are never mutated in place
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out_data, pulls) -> Tensor:
    """Create the op output and record it when a tape is live.

    pulls: sequence of (parent, pull_fn); pull_fn maps the output adjoint to
    that parent's adjoint contribution.
    """
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p, _ in pulls):
        out.requires_grad = True
        tape.records.append((out, tuple(pulls)))
    return out


def backward(loss: Tensor, tape: Tape):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf of the tape.

    Intermediate grads are cleared first so repeated calls accumulate into
    leaves only (leaf grads are never cleared here).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    for out, _ in tape.records:
        out.grad = None
    loss.grad = np.ones_like(loss.data)
    for out, pulls in reversed(tape.records):
        g = out.grad
        if g is None:
            continue
        for parent, pull in pulls:
            if parent.requires_grad:
                parent.accumulate_grad(pull(g))


def _unbroadcast(g, shape):
    """Sum an adjoint down to the (possibly broadcast) parent shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _emit(out, ((a, lambda g: _unbroadcast(g, a.data.shape)),
                       (b, lambda g: _unbroadcast(g, b.data.shape))))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _emit(out, ((a, lambda g: _unbroadcast(g, a.data.shape)),
                       (b, lambda g: _unbroadcast(-g, b.data.shape))))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _emit(out, ((a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
                       (b, lambda g: _unbroadcast(g * a.data, b.data.shape))))


def scale(a, s: float):
    a = as_tensor(a)
    s = float(s)
    return _emit(a.data * s, ((a, lambda g: g * s),))


def matmul(a, b):
    """Matrix product with optional stacked leading dims on either operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = a.data @ b.data

    def pull_a(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        return da if da.shape == a.data.shape else _unbroadcast(da, a.data.shape)

    def pull_b(g):
        db = np.swapaxes(a.data, -1, -2) @ g
        return db if db.shape == b.data.shape else _unbroadcast(db, b.data.shape)

    return _emit(out, ((a, pull_a), (b, pull_b)))


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _emit(out, ((a, lambda g: g.reshape(a.data.shape)),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), ((a, lambda g: g.transpose(inv)),))


def concat_last(a, b):
    a, b = as_tensor(a), as_tensor(b)
    na = a.data.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return _emit(out, ((a, lambda g: g[..., :na]),
                       (b, lambda g: g[..., na:])))


def interleave3(a, b, c):
    """Weave three (B, K, D) tensors into (B, 3K, D): a_0, b_0, c_0, a_1, ..."""
    a, b, c = as_tensor(a), as_tensor(b), as_tensor(c)
    if not (a.data.shape == b.data.shape == c.data.shape) or a.ndim != 3:
        raise ShapeError(f"interleave3: shapes must match and be 3-d, got "
                         f"{a.data.shape}, {b.data.shape}, {c.data.shape}")
    bsz, k, d = a.data.shape
    out = np.empty((bsz, 3 * k, d), dtype=np.float64)
    out[:, 0::3] = a.data
    out[:, 1::3] = b.data
    out[:, 2::3] = c.data

    def make_pull(offset):
        return lambda g: g[:, offset::3]

    return _emit(out, ((a, make_pull(0)), (b, make_pull(1)), (c, make_pull(2))))


def take_stride(a, offset: int, stride: int):
    """Select every stride-th position along axis 1, starting at offset."""
    a = as_tensor(a)
    out = a.data[:, offset::stride].copy()

    def pull(g):
        z = np.zeros_like(a.data)
        z[:, offset::stride] = g
        return z

    return _emit(out, ((a, pull),))


def embedding(table, idx):
    """Row lookup into a (V, D) table with an integer index array."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    out = table.data[idx]

    def pull(g):
        z = np.zeros_like(table.data)
        np.add.at(z, idx, g)
        return z

    return _emit(out, ((table, pull),))


def sum_all(a):
    a = as_tensor(a)
    out = np.asarray(a.data.sum())
    return _emit(out, ((a, lambda g: np.broadcast_to(g, a.data.shape)),))


def sum_last(a):
    a = as_tensor(a)
    out = a.data.sum(axis=-1)
    return _emit(out, ((a, lambda g: np.broadcast_to(g[..., None], a.data.shape)),))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _emit(out, ((a, lambda g: g * (a.data > 0.0)),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, ((a, lambda g: g * (1.0 - out * out)),))


# tanh-approximation GELU; coefficients fixed: sqrt(2/pi) and 0.044715
_GELU_C = 0.7978845608028654

_CAUSAL_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    mask = _CAUSAL_CACHE.get(t)
    if mask is None:
        mask = np.tril(np.ones((t, t), dtype=bool))
        mask.setflags(write=False)
        _CAUSAL_CACHE[t] = mask
    return mask


def gelu(a):
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def pull(g):
        # deriv = 0.5(1+t) + 0.5 x (1-t^2) * C (1 + 3*0.044715 x^2), built in place
        d = t * t
        np.subtract(1.0, d, out=d)
        d *= 0.5
        d *= x
        tmp = x2 * (3 * 0.044715)
        tmp += 1.0
        tmp *= _GELU_C
        d *= tmp
        np.multiply(t, 0.5, out=tmp)
        d += tmp
        d += 0.5
        d *= g
        return d

    return _emit(out, ((a, pull),))


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: last axis must be non-empty")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = xhat * gain.data + bias.data

    def pull_x(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dxhat -= m1
        dxhat -= xhat * m2
        dxhat *= ivar
        return dxhat

    lead = tuple(range(x.ndim - 1))
    return _emit(out, ((x, pull_x),
                       (gain, lambda g: (g * xhat).sum(axis=lead)),
                       (bias, lambda g: g.sum(axis=lead))))


def softmax_causal(scores, key_mask=None):
    """Row softmax over the last axis with a strict causal mask.

    scores has shape (..., T, T); entries with column > row get exactly zero
    weight. An optional boolean key_mask (broadcastable to the key axis)
    additionally zeroes out masked keys, except that the diagonal always stays
    reachable so every row remains a valid distribution.
    """
    scores = as_tensor(scores)
    t = scores.data.shape[-1]
    if scores.ndim < 2 or scores.data.shape[-2] != t:
        raise ShapeError(f"softmax_causal: expected a square score matrix, got {scores.data.shape}")
    allowed = _causal_mask(t)
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        # align the key axis last, broadcasting over query and head axes
        km = km.reshape(km.shape[:-1] + (1,) * (scores.ndim - km.ndim) + (t,))
        allowed = allowed & (km | np.eye(t, dtype=bool))
        allowed = np.broadcast_to(allowed, np.broadcast_shapes(scores.data.shape, allowed.shape))
    # every row keeps at least its diagonal entry, so maxima stay finite and
    # disallowed entries come out of exp as exactly 0.0
    masked = np.where(allowed, scores.data, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def pull(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return _emit(out, ((scores, pull),))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adamw_update(param, grad, m, v, step, lr, weight_decay, beta1, beta2, eps):
    """One in-place AdamW update; weight decay is decoupled from the moments."""
    param *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class AdamW:
    """AdamW over a {name: Tensor} parameter dict.

    Parameters whose grad is None are skipped entirely (no decay), matching
    the usual convention for unused heads.
    """

    def __init__(self, params: dict, lr=1e-4, weight_decay=1e-4,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        live = [(k, p) for k, p in self.params.items() if p.grad is not None]
        # validate everything first so a bad gradient rejects the whole update
        for name, p in live:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter '{name}'")
        self.step_count += 1
        for name, p in live:
            adamw_update(p.data, p.grad, self._m[name], self._v[name],
                         self.step_count, self.lr, self.weight_decay,
                         self.betas[0], self.betas[1], self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central finite differences of a scalar function at selected coordinates.

    Returns an array shaped like x with untested coordinates set to nan when
    coords is given (flat indices).
    """
    x = np.array(x, dtype=np.float64)  # private contiguous copy we can poke
    flat = x.reshape(-1)
    if coords is None:
        coords = range(flat.size)
        out = np.zeros_like(flat)
    else:
        out = np.full_like(flat, np.nan)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)
