"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation the model needs is defined here as a plain
function that computes the forward value with numpy and attaches a closure
computing the vector-Jacobian product.  Graphs are rebuilt on every forward
pass (define-by-run).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

NORM_EPS = 1e-12
LAYER_NORM_EPS = 1e-12

_grad_enabled = True


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff engine."""


class DimensionError(AutodiffError, ValueError):
    pass


class NumericError(AutodiffError, ArithmeticError):
    pass


class DegenerateVectorError(NumericError):
    pass


class LabelError(AutodiffError, ValueError):
    pass


class RankError(AutodiffError, ValueError):
    pass


class AccumulationError(AutodiffError, RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array that may participate in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.isfinite(values).all():
        raise NumericError(f"{op}: produced non-finite values")


def _make(out: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    _check_finite(out, op)
    t = Tensor(out)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
        t._op = op
    return t


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")
    out = a.data / b.data

    def backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(out, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log: input must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU (smooth, so finite-difference checks stay tight)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b`` (cond is constant)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        return (unbroadcast(np.where(cond, g, 0.0), a.shape),
                unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(out, (a, b), backward, "where")


# ---------------------------------------------------------------------------
# shape and reduction


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # shared weight matrix: fold leading axes so the weight gradient is one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward_folded(g):
            g2 = g.reshape(-1, b.shape[1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make(out, (a, b), backward_folded, "matmul")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias over the last axis of ``x`` (one graph node)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        grads = ((g2 @ weight.data.T).reshape(x.shape), x2.T @ g2)
        return grads + (g2.sum(axis=0),) if bias is not None else grads

    return _make(out, parents, backward, "linear")


def attention(q, k, v, key_mask=None, scale: float = 1.0):
    """softmax(q k^T * scale) v over the last two axes, as one graph node.

    ``q`` is [..., Lq, dh], ``k`` and ``v`` are [..., Lk, dh]; ``key_mask``
    broadcasts against the [..., Lq, Lk] score array.  Returns the output
    tensor and the attention weights (a plain array).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape != v.shape or q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    x = _masked_logits(scores, key_mask, -1, "attention")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(w, v.data)

    def backward(g):
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gv = np.matmul(np.swapaxes(w, -1, -2), g)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        return np.matmul(gs, k.data), np.matmul(np.swapaxes(gs, -1, -2), q.data), gv

    return _make(out, (q, k, v), backward, "attention"), w


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (embedding lookup when axis=0)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    n = a.shape[axis]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise DimensionError(f"take: index out of range for axis of size {n}")
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        moved = np.moveaxis(grad, axis, 0)
        g_moved = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, g_moved)
        return (grad,)

    return _make(out, (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward, "stack")


# ---------------------------------------------------------------------------
# normalizations


def _masked_logits(x: np.ndarray, mask, axis: int, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"{op}: non-finite input")
    if x.shape[axis] < 1:
        raise DimensionError(f"{op}: empty axis")
    if mask is None:
        return x
    mask = np.asarray(mask, dtype=bool)
    if not np.broadcast_to(mask, x.shape).any(axis=axis).all():
        raise NumericError(f"{op}: a slice is fully masked")
    return np.where(mask, x, -np.inf)


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax; masked-out entries get probability exactly 0."""
    a = as_tensor(a)
    x = _masked_logits(a.data, mask, axis, "softmax")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = _masked_logits(a.data, None, axis, "log_softmax")
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(a, gain=None, bias=None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply optional affine gain/bias."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]
    parents = [a]
    if gain is not None:
        gain = as_tensor(gain)
        parents.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        parents.append(bias)
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = []
        gx = g * gain.data if gain is not None else g
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        grads.append(dx)
        if gain is not None:
            grads.append(unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(unbroadcast(g, bias.shape))
        return tuple(grads)

    return _make(out, tuple(parents), backward, "layer_norm")


def l2_normalize(a, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateVectorError(f"l2_normalize: vector norm <= {eps}")
    out = a.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (a,), backward, "l2_normalize")


def cosine_sim(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; a scalar for 1-d inputs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_sim: shapes {a.shape} and {b.shape} differ")
    return sum_(l2_normalize(a, axis) * l2_normalize(b, axis), axis=axis)


def masked_mean(a, mask, axis: int = 1) -> Tensor:
    """Mean over ``axis`` counting only positions where ``mask`` is true.

    ``a`` is typically [B, L, d] and ``mask`` [B, L]; padding never contributes
    to either the value or the gradient.
    """
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape[: mask.ndim]:
        raise DimensionError(f"masked_mean: mask shape {mask.shape} does not prefix {a.shape}")
    w = mask.reshape(mask.shape + (1,) * (a.ndim - mask.ndim))
    counts = w.sum(axis=axis, keepdims=True)
    if np.any(counts == 0):
        raise NumericError("masked_mean: a slice has no valid positions")
    weights = w / counts
    out = np.where(w > 0, a.data, 0.0)
    out = (out * weights).sum(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) * weights, a.shape).copy(),)

    return _make(out, (a,), backward, "masked_mean")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class (log-sum-exp form)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"cross_entropy: labels must lie in [0, {c})")
    x = _masked_logits(logits.data, None, -1, "cross_entropy")
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    out = np.asarray((lse - shifted[rows, labels]).mean())

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / b,)

    return _make(out, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Returns a mapping leaf -> gradient array.  Gradients never accumulate
    silently: a second call on the same graph, or on leaves whose gradient was
    not reset with ``zero_grad``, raises ``AccumulationError``.
    """
    if loss.size != 1:
        raise RankError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise AccumulationError("backward: graph already consumed; rebuild it")
    if not loss.requires_grad:
        return {}
    order = _topological_order(loss)
    leaves = [n for n in order if n.is_leaf]
    for leaf in leaves:
        if leaf.grad is not None:
            raise AccumulationError(f"backward: gradient already populated on {leaf!r}; call zero_grad first")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            node.grad = g if g is not None else np.zeros_like(node.data)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    loss._consumed = True
    return {leaf: leaf.grad for leaf in leaves}


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
