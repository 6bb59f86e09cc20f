"""Dense tensors with reverse-mode automatic differentiation, and momentum SGD.

The engine is deliberately small: a :class:`Tensor` wraps a NumPy array and
records the operation that produced it.  Calling :meth:`Tensor.backward` on a
scalar walks the recorded graph in reverse topological order and accumulates
gradients into the leaf tensors that were created with ``requires_grad=True``.

Graphs are single-use.  Leaf gradients accumulate across graphs until
:func:`zero_grad` (or ``Tensor.zero_grad``) clears them.

Storage is float32 by default.  Passing ``dtype=np.float64`` when building
parameters switches a whole computation to 64-bit, which the gradient checks
rely on; every op preserves the dtype of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """A forward value or gradient contained NaN or Inf."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional array that can take part in reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._consumed = False
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- backward ---------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every tracked leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("root is detached: no tracked tensor contributes to it")
        if self._consumed:
            raise RuntimeError("graph was already differentiated; rebuild it for another pass")
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"non-finite root value {self.data!r}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    if not np.isfinite(g).all():
                        raise NonFiniteError("non-finite gradient reached a leaf tensor")
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._consumed = True
            node._parents = ()
            node._backward = None
        self._consumed = True

    # -- operator sugar ---------------------------------------------------------

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# -- elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1 - out * out),))


def square(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to ``[lo, hi]``; gradients pass straight through.

    Only used to absorb rounding overshoot (e.g. cosine 1.0000001), where
    zeroing the gradient would be wrong.
    """
    return Tensor._from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g,))


# -- shape and reduction ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return Tensor._from_op(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing (no duplicate-index write conflicts)."""

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(a.data[index], (a,), backward)


def pick(a: Tensor, cols: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, cols[i]]`` for a 2-D ``a``."""
    rows = np.arange(a.shape[0])
    return take(a, (rows, np.asarray(cols)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def logsumexp(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """``log(sum(mask * exp(a)))`` along ``axis``, with max-subtraction.

    ``mask`` (0/1, broadcastable to ``a``) removes entries from the sum.
    """
    x = a.data
    if mask is None:
        shift = x.max(axis=axis, keepdims=True)
        e = np.exp(x - shift)
    else:
        shift = np.where(mask > 0, x, -np.inf).max(axis=axis, keepdims=True)
        e = np.exp(x - shift) * mask
    s = e.sum(axis=axis, keepdims=True)
    out_k = np.log(s) + shift

    def backward(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return Tensor._from_op(np.squeeze(out_k, axis=axis).astype(x.dtype), (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), backward)


# -- similarity and divergence ---------------------------------------------------


def _check_nonzero_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1))
    if np.any(norms == 0):
        raise ValueError(f"{what} has a zero-norm vector (degenerate embedding)")
    return norms


def normalize_rows(x: Tensor) -> Tensor:
    """Scale every row (last axis) to unit L2 norm; raises on zero rows."""
    _check_nonzero_rows(x.data, "input")
    return x / sqrt(tsum(x * x, axis=-1, keepdims=True))


def pairwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity matrix between the rows of ``a`` and ``b``, clamped to [-1, 1]."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return clamp(normalize_rows(a) @ normalize_rows(b).T, -1.0, 1.0)


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity of two equal-length vectors, clamped to [-1, 1]."""
    a, b = _pair(a, b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"expected two equal-length vectors, got {a.shape} and {b.shape}")
    na, nb = normalize_rows(a), normalize_rows(b)
    return clamp(tsum(na * nb), -1.0, 1.0)


def softmax_with_temperature(scores, tau: float, axis: int = -1) -> Tensor:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    scores = as_tensor(scores)
    return softmax(scores * (1.0 / tau), axis=axis)


def kl_divergence(p, q, axis: int = -1, atol: float = 1e-6) -> Tensor:
    """KL(p || q) along ``axis``; terms with p == 0 contribute zero."""
    p, q = _pair(p, q)
    # float32 rows accumulate rounding roughly in proportion to their length
    tol = max(atol, p.shape[axis] * float(np.finfo(p.dtype).eps))
    for name, t in (("p", p), ("q", q)):
        total = t.data.sum(axis=axis)
        if np.any(np.abs(total - 1) > tol) or np.any(t.data < 0):
            raise ValueError(f"{name} is not a probability vector (sums {total})")
    support = p.data > 0
    if np.any(support & (q.data <= 0)):
        raise ValueError("support violation: p > 0 where q == 0")
    safe_p = np.where(support, p.data, 1)
    safe_q = np.where(support, q.data, 1)
    ratio = np.log(safe_p / safe_q)
    out = np.where(support, p.data * ratio, 0).sum(axis=axis).astype(p.dtype)

    def backward(g):
        g = np.expand_dims(g, axis)
        return (
            np.where(support, g * (ratio + 1), 0),
            np.where(support, -g * safe_p / safe_q, 0),
        )

    return Tensor._from_op(out, (p, q), backward)


# -- gradients and optimisation --------------------------------------------------


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def forward_backward(root: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Back-propagate ``root`` and return ``{name: d root / d param}``.

    Gradients from earlier passes are cleared first so the map holds the
    gradient of this root only.
    """
    zero_grad(params.values())
    root.backward()
    return {name: p.grad.copy() for name, p in params.items()}


@dataclass
class SgdState:
    """Momentum buffers plus hyperparameters for :func:`sgd_step`."""

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], lr: float, momentum: float = 0.0,
                   weight_decay: float = 0.0) -> SgdState:
        buffers = {name: np.zeros_like(p.data) for name, p in params.items()}
        return cls(lr=lr, momentum=momentum, weight_decay=weight_decay, buffers=buffers)

    def copy(self) -> SgdState:
        return SgdState(self.lr, self.momentum, self.weight_decay,
                        {k: v.copy() for k, v in self.buffers.items()})


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             state: SgdState) -> Mapping[str, Tensor]:
    """One in-place momentum SGD update.

    ``g' = g + wd * w``; ``v' = mu * v + g'``; ``w' = w - lr * v'``.
    """
    for name, p in params.items():
        g = grads[name]
        buf = state.buffers.get(name)
        if buf is None:
            buf = state.buffers[name] = np.zeros_like(p.data)
        if g.shape != p.shape or buf.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}, "
                             f"buffer {buf.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        buf *= state.momentum
        buf += g
        if state.lr:
            p.data -= state.lr * buf
    return params
