"""Small reverse-mode differentiation engine on top of numpy.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. :func:`build_tape`
orders the recorded graph topologically and :meth:`Tensor.backward` replays it
in reverse. Nothing is global: a graph lives only as long as its tensors.

All values are float64.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(value) -> Array:
    # float64 arrays are wrapped without copying so parameters can be shared
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """Dense float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("only single-element tensors can be converted to a float")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar; the functional forms below are the real implementations
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

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b)

    def back(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), back)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    x = _wrap(x)
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), back)


def log(x: Tensor) -> Tensor:
    x = _wrap(x)

    def back(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), back)


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.data)

    def back(g):
        return (g * out,)

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (x,), back)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _wrap(x)

    def back(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), back)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = _wrap(x)
    if x.ndim < 2:
        raise ShapeError("transpose needs at least two axes")

    def back(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(x.data, -1, -2).copy(), (x,), back)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis. Leading extents must agree."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"leading extents differ: {a.shape} vs {b.shape}")
    p = a.shape[-1]

    def back(g):
        return g[..., :p], g[..., p:]

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), back)


def take_last(x: Tensor, index: Array) -> Tensor:
    """Pick ``x[..., index[...]]``, one entry per leading position."""
    x = _wrap(x)
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} does not match {x.shape[:-1]}")
    picked = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def back(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _make(picked, (x,), back)


# ---------------------------------------------------------------------------
# linear algebra and attention


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy ``@`` semantics (leading axes are batch axes)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back)


def softmax_rows(x: Tensor, mask: Array | None = None) -> Tensor:
    """Softmax over the last axis, shifted by the row max for stability.

    ``mask`` (boolean, broadcastable to ``x``) marks entries that take part;
    excluded entries get probability exactly 0 and receive no gradient. Every
    row must keep at least one entry.
    """
    x = _wrap(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row with every entry masked out")
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), back)


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: Array | None = None
) -> Tensor:
    """``softmax(q k^T / sqrt(d_k)) v``.

    Shapes are ``q: [..., m, d]``, ``k: [..., n, d]``, ``v: [..., n, dv]``.
    The common case here is a single query row against ``n`` incoming
    messages. ``mask`` is ``[..., m, n]`` and drops keys per query.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if k.shape[-2] == 0:
        raise ValueError("attention needs at least one key/value row")
    d_k = q.shape[-1]
    if d_k == 0 or k.shape[-1] != d_k:
        raise ShapeError(f"query/key widths differ or are empty: {q.shape}, {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value row counts differ: {k.shape}, {v.shape}")
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d_k))
    return matmul(softmax_rows(scores, mask=mask), v)


# ---------------------------------------------------------------------------
# backward pass


def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto whatever is already stored, so callers zero them
    between independent backward passes.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring gradients")
    tape = build_tape(loss)
    pending: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    """Plain gradient descent: ``p <- p - lr * g``."""

    def __init__(self, lr: float = 0.002):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr

    def step(self, params: dict[str, Array], grads: dict[str, Array]) -> None:
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
            p -= self.lr * g


class Adam:
    """Adaptive-moment update with bias correction."""

    def __init__(self, lr: float = 0.002, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}

    def step(self, params: dict[str, Array], grads: dict[str, Array]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(rule: str, lr: float):
    if rule == "adam":
        return Adam(lr)
    if rule == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer rule {rule!r}")


def optimizer_step(params: dict[str, Array], grads: dict[str, Array], lr: float, rule: str = "sgd", state=None):
    """One-shot update helper. Pass a persistent ``state`` optimizer for Adam."""
    opt = state if state is not None else make_optimizer(rule, lr)
    opt.step(params, grads)
    return params


def numerical_grad(f: Callable[[], float], arrays: Iterable[Array], step: float = 1e-5) -> list[Array]:
    """Central finite differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = f()
            flat[i] = old - step
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads
