"""Layers, parameter registry and optimiser built on :mod:`pepscreen.tensor`."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import MaskError, ShapeError, Tensor


class Module:
    """Container that registers parameters under dotted names.

    Parameters are created through :meth:`param` and sub-modules through
    :meth:`child`, so the name set is fixed at construction time and never
    depends on runtime flags.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params or name in self._children:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        if name in self._params or name in self._children:
            raise ValueError(f"duplicate module name {name!r}")
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, c in self._children.items():
            out.update(c.named_parameters(prefix + cname + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.named_parameters()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"parameter name mismatch; missing={missing} unexpected={extra}")
        for k, p in own.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ShapeError(f"parameter {k}: checkpoint shape {v.shape} vs model {p.shape}")
            p.values[...] = v

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        w = np.zeros((d_in, d_out)) if zero_init else glorot(rng, d_in, d_out, (d_in, d_out))
        self.weight = self.param("weight", w)
        self.bias = self.param("bias", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(d))
        self.beta = self.param("beta", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        self.kernel = kernel
        self.weight = self.param("weight", glorot(rng, c_in * kernel, c_out * kernel, (kernel, c_in, c_out)))
        self.bias = self.param("bias", np.zeros(c_out))

    def __call__(self, x: Tensor, dilation: int = 1) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, dilation=dilation)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, key_valid=None):
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``key_valid`` is a boolean array broadcastable to (..., n_q, n_k) marking
    keys that may be attended; usually shaped (..., 1, n_k).
    Returns ``(output, weights)``.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query dim {q.shape} vs key dim {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys vs {v.shape[-2]} values")
    scores = T.mul(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    if key_valid is not None:
        kv = np.asarray(key_valid, dtype=bool)
        full = np.broadcast_to(kv, scores.shape) if kv.ndim else kv
        if np.any(~np.any(full, axis=-1)):
            raise MaskError("attention: every key is masked for some query")
    weights = T.softmax(scores, axis=-1, valid=key_valid)
    return T.matmul(weights, v), weights


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, d_kv: int | None = None):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"heads={heads} must divide d_model={d_model}")
        d_kv = d_kv or d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.q = self.child("q", Linear(d_model, d_model, rng))
        self.k = self.child("k", Linear(d_kv, d_model, rng))
        self.v = self.child("v", Linear(d_kv, d_model, rng))
        self.o = self.child("o", Linear(d_model, d_model, rng))

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, _ = x.shape
        x = T.reshape(x, (*lead, n, self.heads, self.d_head))
        nd = len(lead)
        return T.transpose(x, (*range(nd), nd + 1, nd, nd + 2))

    def _merge(self, x: Tensor) -> Tensor:
        *lead, h, n, dh = x.shape
        nd = len(lead)
        x = T.transpose(x, (*range(nd), nd + 1, nd, nd + 2))
        return T.reshape(x, (*lead, n, h * dh))

    def __call__(self, query: Tensor, context: Tensor, key_valid=None, causal: bool = False):
        """Attend from ``query`` (..., n_q, d) over ``context`` (..., n_k, d_kv).

        ``key_valid``: (..., n_k) boolean. Returns (output, head-averaged weights).
        """
        qh = self._split(self.q(query))
        kh = self._split(self.k(context))
        vh = self._split(self.v(context))
        n_q, n_k = query.shape[-2], context.shape[-2]
        mask = None
        if key_valid is not None:
            kv = np.asarray(key_valid, dtype=bool)
            mask = kv[..., None, None, :]
        if causal:
            tri = np.tril(np.ones((n_q, n_k), dtype=bool))
            mask = tri if mask is None else (mask & tri)
        out, w = scaled_dot_attention(qh, kh, vh, mask)
        return self.o(self._merge(out)), w.values.mean(axis=-3)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.inner = self.child("inner", Linear(d_model, d_ff, rng))
        self.outer = self.child("outer", Linear(d_ff, d_model, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))


@dataclass
class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    params: dict[str, Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, names: set[str] | None = None) -> None:
        self.step_count += 1
        b1t = 1.0 - self.beta1 ** self.step_count
        b2t = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if names is not None and name not in names:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.values
            m = self.m.setdefault(name, np.zeros_like(p.values))
            v = self.v.setdefault(name, np.zeros_like(p.values))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def binary_cross_entropy_with_logits(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean of softplus(z) - y z, optionally weighted (weights sum normalised)."""
    y = np.asarray(labels, dtype=np.float64)
    per = T.sub(T.softplus(logits), T.mul(logits, y))
    if weights is None:
        return T.mean(per)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("binary_cross_entropy_with_logits: weights sum to zero")
    return T.sum(T.mul(per, w / total))
