"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor`. A graph is recorded only while
gradients are enabled and at least one input requires grad; ``backward``
orders the recorded graph into a :class:`Tape` and walks it in reverse.

There is deliberately no broadcasting. Binary elementwise ops demand equal
shapes; the single exception is :func:`add_bias_row`.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class LabelError(ValueError):
    """A class index or label is outside the known label set."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _all_finite(data: np.ndarray) -> bool:
    # one reduction catches any nan/inf; only an overflowing sum needs the full scan
    return math.isfinite(np.add.reduce(data, axis=None)) or bool(np.isfinite(data).all())


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if not _all_finite(data):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- tape


class Tape:
    """Recorded operations in topological order (parents before children)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable grad-requiring t."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_root(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k)@(k,n), or batched (B,m,k)@(B,k,n) with identical batch dims."""
    if a.ndim != b.ndim or a.ndim not in (2, 3) or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    return _result(A @ B, (a, b), back, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A), "hadamard")


def scalar_mul(s: Tensor, x: Tensor) -> Tensor:
    """Scale every element of ``x`` by the scalar tensor ``s``."""
    if s.data.size != 1:
        raise ShapeError(f"scalar_mul: expected a scalar, got {s.shape}")
    S, X = s.data, x.data
    return _result(float(S) * X, (s, x), lambda g: (np.asarray((g * X).sum()).reshape(S.shape), g * float(S)), "scalar_mul")


def add_bias_row(x: Tensor, b: Tensor) -> Tensor:
    """x[..., n] + b[n]; the only broadcasting op."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias_row: bias {b.shape} does not match rows of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias_row")


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant (non-differentiable) array of the same shape, e.g. an attention mask."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.shape:
        raise ShapeError(f"add_const: shape mismatch {x.shape} vs {c.shape}")
    return _result(x.data + c, (x,), lambda g: (g,), "add_const")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def one_minus(x: Tensor) -> Tensor:
    return _result(1.0 - x.data, (x,), lambda g: (-g,), "one_minus")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    X = x.data
    inner = _GELU_C * (X + 0.044715 * X**3)
    th = np.tanh(inner)
    out = 0.5 * X * (1.0 + th)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * X**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * X * (1.0 - th**2) * d_inner),)

    return _result(out, (x,), back, "gelu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. p == 0 (the default everywhere) is an exact identity."""
    if p <= 0.0 or rng is None:
        return x
    if p >= 1.0:
        raise ContractError(f"dropout probability must be < 1, got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- reductions / normalisation


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs last axis {d}")
    X = x.data
    xc = X - np.add.reduce(X, axis=-1, keepdims=True) / d
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        dxhat = g * G
        dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * G + beta.data, (x, gamma, beta), back, "layer_norm")


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(src, float(g)),), "sum")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: need equal 1-D shapes, got {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _result(np.asarray(A @ B), (a, b), lambda g: (g * B, g * A), "dot")


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logit vector."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= int(target) < n:
        raise LabelError(f"target {target} outside [0, {n})")
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    loss = lse - z[target]
    p = np.exp(z - lse)

    def back(g):
        d = p.copy()
        d[target] -= 1.0
        return (g * d,)

    return _result(np.asarray(loss), (logits,), back, "cross_entropy")


# ---------------------------------------------------------------- structure


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: leading shapes differ {a.shape} vs {b.shape}")
    k = a.shape[-1]
    return _result(np.concatenate([a.data, b.data], axis=-1), (a, b), lambda g: (g[..., :k], g[..., k:]), "concat")


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack equal-length 1-D tensors into an (n, d) matrix."""
    if not rows:
        raise ContractError("stack_rows needs at least one row")
    d = rows[0].shape
    for r in rows:
        if r.ndim != 1 or r.shape != d:
            raise ShapeError(f"stack_rows: row shape {r.shape} vs {d}")
    data = np.stack([r.data for r in rows])
    return _result(data, tuple(rows), lambda g: tuple(g[i] for i in range(len(rows))), "stack_rows")


def take_row(x: Tensor, i: int) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"take_row expects a matrix, got {x.shape}")
    src = x.shape

    def back(g):
        out = np.zeros(src)
        out[i] = g
        return (out,)

    return _result(x.data[i].copy(), (x,), back, "take_row")


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; gradient scatters back with accumulation."""
    idx = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"embedding id out of range [0, {n}): {idx.tolist()}")
    src = table.shape

    def back(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return _result(table.data[idx], (table,), back, "embedding")


def detach(x: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._op = "detach"
    return out


# ---------------------------------------------------------------- gradient checking


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``t``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = f().item()
            flat[k] = orig - h
            fm = f().item()
            flat[k] = orig
            out.reshape(-1)[k] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a| + |n|, floor), elementwise."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def check_gradients(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> dict[str, float]:
    """Compare tape gradients with central differences; returns worst relative error per tensor."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    report = {}
    for k, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        report[p.name or f"param{k}"] = relative_error(analytic, numerical_grad(f, p, h))
    return report
