"""Small reverse-mode autodiff over numpy arrays.

Only the operations a decoder-only transformer needs are provided. Several
of them (layer norm, masked softmax, per-token cross entropy) are fused so
that the recorded graph stays short and the backward rules stay auditable.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "MASK_VALUE",
    "LN_EPS",
    "NonFiniteError",
    "Tensor",
    "tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "embedding",
    "take_rows",
    "scatter_add_rows",
    "cross_entropy_per_token",
    "sum_all",
    "mean_over",
    "backward",
    "SGD",
    "Adam",
    "optimizer_step",
]

# Additive surrogate for -inf; anything at or below half of it counts as masked.
MASK_VALUE = -1e9
LN_EPS = 1e-5

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a gradient is NaN or infinite."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


class Tensor:
    """Dense array plus the bookkeeping needed for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar, used sparingly by the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a constant array (e.g. a 0/1 mask)."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        return (g * c,)

    return _result(a.data * c, "scale", (a,), bw)


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading ones."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ _swap_last(b.data), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # weight matrix shared over the batch: fold batch axes into rows
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(_swap_last(a.data) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, "matmul", (a, b), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), "reshape", (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), "transpose", (a,), bw)


def softmax_rows(x: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last axis with an additive mask.

    Entries whose mask is ``MASK_VALUE`` (or lower) get probability exactly 0.
    A row with every entry masked returns all zeros instead of a uniform row.
    """
    z = x.data
    if additive_mask is not None:
        m = np.asarray(additive_mask, dtype=z.dtype)
        z = z + m
        keep = np.broadcast_to(m > MASK_VALUE / 2, z.shape)
    else:
        keep = None
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    if keep is not None:
        e = np.where(keep, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    empty = denom == 0
    y = e / np.where(empty, 1.0, denom)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "softmax_rows", (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _result(out, "layer_norm", (x, gain, bias), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, which keeps gradient checks clean)."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        return (g * d,)

    return _result(out, "gelu", (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("token id outside embedding table")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], "embedding", (table,), bw)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows of a 2-d tensor."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], "take_rows", (x,), bw)


def scatter_add_rows(base: Tensor, idx, values: Tensor) -> Tensor:
    """Return a copy of ``base`` with ``values`` added into rows ``idx``.

    Rows not listed in ``idx`` are copied unchanged, bit for bit.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter indices must be unique")
    out = base.data.copy()
    out[idx] += values.data

    def bw(g):
        return g, g[idx]

    return _result(out, "scatter_add_rows", (base, values), bw)


def cross_entropy_per_token(logits: Tensor, targets, eval_positions) -> Tensor:
    """Per-row negative log-likelihood of ``targets`` under ``logits``.

    ``logits`` is ``[positions, vocab]``. Rows where ``eval_positions`` is
    false yield 0 and receive no gradient; their targets are not inspected.
    """
    if logits.data.ndim != 2:
        raise ValueError("logits must be [positions, vocab]")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    ev = np.asarray(eval_positions, dtype=bool).reshape(-1)
    if targets.shape[0] != n or ev.shape[0] != n:
        raise ValueError("targets / eval_positions length differs from logits rows")
    t_eval = targets[ev]
    if t_eval.size and (t_eval.min() < 0 or t_eval.max() >= v):
        raise ValueError("target id out of vocabulary")
    safe_t = np.where(ev, targets, 0)
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[:, 0]
    rows = np.arange(n)
    loss = np.where(ev, lse - z[rows, safe_t], 0.0).astype(z.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, safe_t] -= 1.0
        return (p * (g * ev)[:, None],)

    return _result(loss, "cross_entropy", (logits,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum()), "sum", (x,), bw)


def mean_over(x: Tensor, count: int) -> Tensor:
    """Sum of all entries divided by ``count`` (a mean over a chosen subset)."""
    if count <= 0:
        raise ValueError("mean over an empty set")
    return scale(sum_all(x), 1.0 / count)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The graph is released afterwards; calling this twice on the same loss
    raises ``RuntimeError``.
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if loss._consumed:
        raise RuntimeError("backward already called on this graph")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        node._parents = ()
        node._backward = None
    loss._consumed = True


class SGD:
    """Plain gradient descent: ``p <- p - lr * g``."""

    def __init__(self, lr: float):
        self.lr = lr

    def update(self, name: str, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        return p - self.lr * g

    def state_dict(self) -> dict:
        return {}


class Adam:
    """Adam with bias correction and fixed defaults beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def begin_step(self) -> None:
        self.t += 1

    def update(self, name: str, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        m = self.m.get(name)
        v = self.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = self.beta1 * m + (1 - self.beta1) * g
        v = self.beta2 * v + (1 - self.beta2) * g * g
        self.m[name], self.v[name] = m, v
        mhat = m / (1 - self.beta1**self.t)
        vhat = v / (1 - self.beta2**self.t)
        return (p - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def optimizer_step(params: dict[str, Tensor], optimizer=None, lr: float | None = None) -> None:
    """Apply one update to every parameter that has a gradient.

    All gradients are checked before anything is modified, so a non-finite
    gradient aborts the whole step and leaves the parameters untouched.
    """
    if optimizer is None:
        if lr is None:
            raise ValueError("need an optimizer or a learning rate")
        optimizer = SGD(lr)
    items = [(k, p) for k, p in params.items() if p.requires_grad]
    for name, p in items:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for {name!r}; step aborted")
    if isinstance(optimizer, Adam):
        optimizer.begin_step()
    for name, p in items:
        p.data = np.asarray(optimizer.update(name, p.data, p.grad), dtype=p.data.dtype)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
