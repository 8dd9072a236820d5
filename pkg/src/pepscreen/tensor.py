"""Minimal reverse-mode autograd over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' gradient contributions. A graph is built
fresh on each forward pass; :func:`backward` traces it from the loss.

Broadcasting is deliberately narrow. Binary elementwise ops accept equal
shapes, a scalar operand, or a 1-D operand matching the last axis (a per-row
bias). Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_DEBUG = False
_GRAD = threading.local()  # per-thread so concurrent inference cannot leak the flag


class ShapeError(ValueError):
    pass


class MaskError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, shape: tuple):
        super().__init__(f"non-finite values produced by op '{op}' (shape {shape})")
        self.op = op
        self.shape = shape


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every forward output for NaN/Inf while active."""
    global _DEBUG
    prev = _DEBUG
    _DEBUG = enabled
    try:
        yield
    finally:
        _DEBUG = prev


@contextlib.contextmanager
def no_grad():
    """Build no graph while active (inference)."""
    prev = grad_enabled()
    _GRAD.enabled = False
    try:
        yield
    finally:
        _GRAD.enabled = prev


def grad_enabled() -> bool:
    return getattr(_GRAD, "enabled", True)


class Tensor:
    __slots__ = ("values", "_grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, op: str = "leaf", name: str | None = None):
        self.values = np.asarray(values, dtype=DTYPE)
        self._grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = np.asarray(value, dtype=DTYPE)

    def zero_grad(self) -> None:
        self._grad = None

    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t._grad is None:
        t._grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t._grad += g


def _make(values: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(values)):
        raise NonFiniteError(op, np.shape(values))
    out = Tensor(values, op=op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward
    return out


def _binary_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= 1:
        return "b_scalar"
    if a.size == 1 and a.ndim <= 1:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b_row"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a_row"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str, shape: tuple) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{side}_scalar":
        return np.sum(g).reshape(shape)
    if kind == f"{side}_row":
        return g.reshape(-1, shape[0]).sum(axis=0)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _binary_kind(a, b, "add")
    va, vb = a.values, b.values
    if kind == "b_scalar":
        vb = vb.reshape(())
    elif kind == "a_scalar":
        va = va.reshape(())

    def backward(g):
        _accum(a, _reduce_to(g, kind, "a", a.shape))
        _accum(b, _reduce_to(g, kind, "b", b.shape))

    return _make(va + vb, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _binary_kind(a, b, "mul")
    va, vb = a.values, b.values
    if kind == "b_scalar":
        vb = vb.reshape(())
    elif kind == "a_scalar":
        va = va.reshape(())

    def backward(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * vb, kind, "a", a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * va, kind, "b", b.shape))

    return _make(va * vb, (a, b), backward, "mul")


def _unary(x: Tensor, out: np.ndarray, local_grad: Callable[[], np.ndarray], op: str) -> Tensor:
    def backward(g):
        _accum(x, g * local_grad())

    return _make(out, (x,), backward, op)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so neither branch overflows
    v = x.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _unary(x, out, lambda: out * (1.0 - out), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.values)
    return _unary(x, out, lambda: 1.0 - out * out, "tanh")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.values, 0.0)
    return _unary(x, out, lambda: (x.values > 0).astype(DTYPE), "relu")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return _unary(x, out, lambda: out, "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.log(x.values), lambda: 1.0 / x.values, "log")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = as_tensor(x)
    v = x.values
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def local():
        s = np.empty_like(v)
        pos = v >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        s[~pos] = ev / (1.0 + ev)
        return s

    return _unary(x, out, local, "softplus")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _unary(x, x.values * x.values, lambda: 2.0 * x.values, "square")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------- masking

def _expand_mask(mask, shape: tuple, op: str) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    try:
        return np.broadcast_to(m, shape)
    except ValueError:
        raise ShapeError(f"{op}: mask shape {m.shape} does not fit tensor shape {shape}") from None


def masked_fill(x: Tensor, where, value: float = 0.0) -> Tensor:
    """Replace entries where ``where`` is True; those entries get zero gradient."""
    x = as_tensor(x)
    m = _expand_mask(where, x.shape, "masked_fill")
    out = np.where(m, value, x.values)

    def backward(g):
        _accum(x, np.where(m, 0.0, g))

    return _make(out, (x,), backward, "masked_fill")


def softmax(x: Tensor, axis: int = -1, valid=None) -> Tensor:
    """Softmax along ``axis``; entries with ``valid`` False get weight 0."""
    x = as_tensor(x)
    v = x.values
    if valid is not None:
        m = _expand_mask(valid, x.shape, "softmax")
        if np.any(~m.any(axis=axis)):
            raise MaskError("softmax over a fully masked axis")
        v = np.where(m, v, -np.inf)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        _accum(x, out * (g - inner))

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1, valid=None) -> Tensor:
    x = as_tensor(x)
    v = x.values
    m = None
    if valid is not None:
        m = _expand_mask(valid, x.shape, "log_softmax")
        if np.any(~m.any(axis=axis)):
            raise MaskError("log_softmax over a fully masked axis")
        v = np.where(m, v, -np.inf)
    mx = np.max(v, axis=axis, keepdims=True)
    lse = mx + np.log(np.sum(np.exp(v - mx), axis=axis, keepdims=True))
    out = v - lse
    p = np.exp(out)
    if m is not None:
        out = np.where(m, out, 0.0)

    def backward(g):
        gm = g if m is None else np.where(m, g, 0.0)
        _accum(x, gm - p * np.sum(gm, axis=axis, keepdims=True))

    return _make(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """(..., n, k) @ (k, m) or batched (..., n, k) @ (..., k, m) with equal batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    out = a.values @ b.values

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.values, -1, -2))
        if b.requires_grad:
            if shared:
                k = a.shape[-1]
                _accum(b, a.values.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.swapaxes(a.values, -1, -2) @ g)

    return _make(out, (a, b), backward, "matmul")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.transpose(g, inv))

    return _make(np.transpose(x.values, axes), (x,), backward, "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def backward(g):
        _accum(x, g.reshape(src))

    return _make(x.values.reshape(tuple(shape)), (x,), backward, "reshape")


def getitem(x: Tensor, key) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.values)
            np.add.at(gx, key, g)
            _accum(x, gx)

    return _make(x.values[key], (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=ax)):
            _accum(t, piece)

    return _make(np.concatenate([t.values for t in ts], axis=ax), ts, backward, "concat")


def embedding(table: Tensor, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of {table.shape[0]} rows")

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.values)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accum(table, gt)

    return _make(table.values[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.values, axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(gg, x.shape))

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def _pool_mask(x: Tensor, valid, op: str) -> np.ndarray:
    if x.ndim < 2:
        raise ShapeError(f"{op}: expected (..., L, D), got {x.shape}")
    m = np.asarray(valid, dtype=bool)
    if m.shape != x.shape[:-1]:
        raise ShapeError(f"{op}: mask shape {m.shape} does not match {x.shape[:-1]}")
    if np.any(~m.any(axis=-1)):
        raise MaskError(f"{op}: sequence with no valid positions")
    return m


def mean_pool(x: Tensor, valid) -> Tensor:
    """Masked mean over the sequence axis: (..., L, D) -> (..., D)."""
    x = as_tensor(x)
    m = _pool_mask(x, valid, "mean_pool")
    w = m.astype(DTYPE) / m.sum(axis=-1, keepdims=True)
    out = np.einsum("...l,...ld->...d", w, x.values)

    def backward(g):
        _accum(x, w[..., :, None] * g[..., None, :])

    return _make(out, (x,), backward, "mean_pool")


def max_pool(x: Tensor, valid) -> Tensor:
    """Masked max over the sequence axis: (..., L, D) -> (..., D)."""
    x = as_tensor(x)
    m = _pool_mask(x, valid, "max_pool")
    v = np.where(m[..., None], x.values, -np.inf)
    idx = np.argmax(v, axis=-2)
    out = np.take_along_axis(x.values, idx[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        gx = np.zeros_like(x.values)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        _accum(x, gx)

    return _make(out, (x,), backward, "max_pool")


# ---------------------------------------------------------------- normalisation

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs features {d}")
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.values + beta.values

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.values
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit norm."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.values * x.values, axis=-1, keepdims=True) + eps)
    out = x.values / norm

    def backward(g):
        _accum(x, (g - out * np.sum(g * out, axis=-1, keepdims=True)) / norm)

    return _make(out, (x,), backward, "l2_normalize")


# ---------------------------------------------------------------- convolution

def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1,
           padding: str = "same") -> Tensor:
    """1-D cross-correlation over the sequence axis.

    x: (..., L, C_in); weight: (K, C_in, C_out); bias: (C_out,).
    ``y[i] = sum_k x[i + k*dilation - left] @ weight[k]`` where ``left`` is the
    left zero-padding ("same" keeps L; "valid" uses none).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim < 2 or weight.ndim != 3 or weight.shape[1] != x.shape[-1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {weight.shape}")
    if dilation < 1:
        raise ValueError("conv1d: dilation must be >= 1")
    k, _, c_out = weight.shape
    length = x.shape[-2]
    span = dilation * (k - 1)
    if padding == "same":
        left, right = span // 2, span - span // 2
    elif padding == "valid":
        left = right = 0
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")
    out_len = length + left + right - span
    if out_len < 1:
        raise ShapeError(f"conv1d: input length {length} too short for span {span + 1}")
    pad_width = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x.values, pad_width)
    out = np.zeros(x.shape[:-2] + (out_len, c_out), dtype=DTYPE)
    for j in range(k):
        s = j * dilation
        out += xp[..., s:s + out_len, :] @ weight.values[j]
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d: bias {bias.shape} vs {c_out} output channels")
        out += bias.values
        parents = (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                s = j * dilation
                gxp[..., s:s + out_len, :] += g @ weight.values[j].T
            _accum(x, gxp[..., left:left + length, :])
        if weight.requires_grad:
            gw = np.empty_like(weight.values)
            g2 = g.reshape(-1, c_out)
            for j in range(k):
                s = j * dilation
                gw[j] = xp[..., s:s + out_len, :].reshape(-1, weight.shape[1]).T @ g2
            _accum(weight, gw)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.reshape(-1, c_out).sum(axis=0))

    return _make(out, parents, backward, "conv1d")


# ---------------------------------------------------------------- graph

class ComputationGraph:
    """Nodes reachable from a root, in topological order (inputs first)."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = trace(root)

    def parameters(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf() and n.requires_grad]

    def __len__(self) -> int:
        return len(self.nodes)


def trace(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, graph: ComputationGraph | None = None) -> ComputationGraph:
    """Propagate d(loss)/d(node) to every node that requires grad.

    Leaf gradients accumulate across calls; intermediate gradients are
    overwritten with this call's values.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if graph is None or graph.root is not loss:
        graph = ComputationGraph(loss)
    if not loss.requires_grad:
        return graph
    for node in graph.nodes:
        if not node.is_leaf():
            node._grad = None
    if loss.is_leaf():
        _accum(loss, np.ones_like(loss.values))
        return graph
    loss._grad = np.ones_like(loss.values)
    for node in reversed(graph.nodes):
        if node.is_leaf() or node._grad is None:
            continue
        node._backward(node._grad)
    return graph


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is ``|a - n| / max(1, |a|, |n|)``. ``loss_fn`` must
    rebuild the graph on each call. When ``max_coords`` is set, that many
    coordinates per parameter are sampled with ``rng``.
    """
    if not (0.0 < h <= 1e-3):
        raise ValueError(f"grad_check: step h={h} outside (0, 1e-3]")
    for p in params:
        if not np.all(np.isfinite(p.values)):
            raise NonFiniteError(p.name or "parameter", p.shape)
    zero_grad(params)
    with debug_mode():
        loss = loss_fn()
        backward(loss)
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with debug_mode():
        for p, ga in zip(params, analytic):
            flat = p.values.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2.0 * h)
                a = ga.reshape(-1)[i]
                err = abs(a - num) / max(1.0, abs(a), abs(num))
                worst = max(worst, err)
    zero_grad(params)
    return worst
