"""Reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Operations on tensors that require
gradients record their operands and a backward rule; :meth:`Tensor.backward`
walks the recorded graph once in reverse topological order and then releases
it. Gradients are available for inputs as well as parameters, which is what
the gradient attacks need.
"""

from __future__ import annotations

import contextlib
import ctypes
import sys
from typing import Callable, Iterable, Sequence

import numpy as np

from .rng import SplitMix64

SMOOTH_L1_BETA = 1.0
LAYER_NORM_EPS = 1e-5


def keep_freed_memory(limit: int = 1 << 25) -> bool:
    """Ask glibc to recycle large freed blocks instead of returning them to the OS.

    Training allocates and frees the same multi-megabyte temporaries every
    batch; without this each one is a fresh mmap that page-faults on first
    touch. Returns False where the allocator cannot be tuned.
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
        m_trim_threshold, m_mmap_threshold = -1, -3
        return bool(libc.mallopt(m_mmap_threshold, limit)) and bool(libc.mallopt(m_trim_threshold, 4 * limit))
    except (OSError, AttributeError):
        return False


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class NumericError(ArithmeticError):
    """A forward or backward computation produced NaN or inf."""


class GraphError(RuntimeError):
    """Backward called on a detached, non-scalar or already released graph."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_released")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor.

        Leaves accumulate (``+=``) so parameter gradients sum across calls
        until zeroed; intermediate tensors are overwritten. The graph is
        released afterwards and a second call raises :class:`GraphError`.
        """
        if self._released:
            raise GraphError("graph already released by an earlier backward(); rebuild it")
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad or self.is_leaf:
            raise GraphError("loss is not connected to any tensor that requires grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if not _all_finite(pg):
                    raise NumericError(f"non-finite gradient flowing out of '{node.op}'")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None
                node._released = True

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _all_finite(x: np.ndarray) -> bool:
    # a sum is NaN/inf whenever any term is; a finite-overflow false alarm needs |sum| > 1e308
    return bool(np.isfinite(np.add.reduce(x, axis=None)))


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not _all_finite(out):
        raise NumericError(f"'{op}' produced non-finite values")
    return out


def _make(out: np.ndarray, parents: tuple[Tensor, ...], backward, op: str, check: bool = True) -> Tensor:
    # ops that only move or select finite values skip the check (check=False)
    t = Tensor(_finite(out, op) if check else out)
    t.op = op
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    return t


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


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0.0),), "relu", check=False)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sign(a: Tensor) -> Tensor:
    # sign(0) = 0; gradient is identically zero
    return _make(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),), "sign", check=False)


def clamp(a: Tensor, low, high) -> Tensor:
    """Clamp into [low, high]; gradient passes where low <= a <= high."""
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    if np.any(low > high):
        raise ShapeError("clamp: low exceeds high")
    out = np.minimum(np.maximum(a.data, low), high)
    inside = (a.data >= low) & (a.data <= high)
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    # (..., K) @ (K, N) runs as one 2-D GEMM instead of a batch of small ones
    flat = b.ndim == 2 and a.ndim > 2
    k, n = b.shape[-2], b.shape[-1]
    try:
        if flat:
            out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
        else:
            out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x (..., K), weight (K, N), bias (N,)."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    k, n = weight.shape
    x2 = x.data.reshape(-1, k)
    out = x2 @ weight.data
    out += bias.data

    def backward(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out.reshape(x.shape[:-1] + (n,)), (x, weight, bias), backward, "linear")


# ---------------------------------------------------------------- reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), backward, "mean")


def cumsum(a: Tensor, axis: int) -> Tensor:
    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), backward, "cumsum")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {a.shape} with gamma {gamma.shape}, beta {beta.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        ga = gg = gbeta = None
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gbeta = g.sum(axis=lead)
        if a.requires_grad:
            gx = g * gamma.data
            proj = (gx * xhat).mean(axis=-1, keepdims=True)
            gx -= gx.mean(axis=-1, keepdims=True)
            gx -= xhat * proj
            gx *= inv
            ga = gx
        return ga, gg, gbeta

    return _make(out, (a, gamma, beta), backward, "layer_norm")


def dropout(a: Tensor, p: float, rng: SplitMix64 | None, training: bool) -> Tensor:
    """Inverted dropout. Eval mode (or p == 0) returns ``a`` itself."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout: probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a random stream")
    keep = rng.keep_mask(a.shape, 1.0 - p).astype(np.float64) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- structure

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape", check=False)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose", check=False)


def getitem(a: Tensor, index) -> Tensor:
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None

    def backward(g):
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, dtype=np.float64, copy=True), (a,), backward, "slice", check=False)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward, "concat", check=False)


# ---------------------------------------------------------------- losses

def _check_same(kind: str, prediction: Tensor, target: Tensor) -> None:
    if prediction.shape != target.shape:
        raise ShapeError(f"{kind}: prediction {prediction.shape} vs target {target.shape}")


def smooth_l1(prediction: Tensor, target, beta: float = SMOOTH_L1_BETA) -> Tensor:
    """Mean Huber-style loss: 0.5*d**2/beta if |d| < beta else |d| - 0.5*beta."""
    target = as_tensor(target)
    _check_same("smooth_l1", prediction, target)
    d = prediction.data - target.data
    ad = np.abs(d)
    small = ad < beta
    n = d.size
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta).mean()

    def backward(g):
        gd = g * np.where(small, d / beta, np.sign(d)) / n
        return gd, -gd

    return _make(np.asarray(out), (prediction, target), backward, "smooth_l1")


def mse(prediction: Tensor, target) -> Tensor:
    target = as_tensor(target)
    _check_same("mse", prediction, target)
    d = prediction.data - target.data
    n = d.size

    def backward(g):
        gd = g * 2.0 * d / n
        return gd, -gd

    return _make(np.asarray((d * d).mean()), (prediction, target), backward, "mse")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    target = as_tensor(target)
    _check_same("bce_with_logits", logits, target)
    y = target.data
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ShapeError("bce_with_logits: targets must be 0 or 1")
    x = logits.data
    n = x.size
    out = (np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean()

    def backward(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return g * (sig - y) / n, None

    return _make(np.asarray(out), (logits, target), backward, "bce_with_logits")


LOSSES = {"smooth_l1": smooth_l1, "mse": mse, "bce_with_logits": bce_with_logits}


def loss(prediction: Tensor, target, kind: str) -> Tensor:
    try:
        fn = LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {sorted(LOSSES)}") from None
    return fn(prediction, target)


# ---------------------------------------------------------------- helpers

@contextlib.contextmanager
def frozen(params: Iterable[Tensor]):
    """Temporarily stop ``params`` from requiring grad.

    Values and existing ``.grad`` buffers are left untouched.
    """
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def grad_wrt_input(model, state: Tensor, target, loss_kind="mse") -> np.ndarray:
    """Gradient of ``loss(model(state), target)`` with respect to ``state``.

    ``loss_kind`` is a name from :data:`LOSSES` or a callable
    ``(prediction, target) -> scalar Tensor``. Model parameters are frozen for
    the call, so neither their values nor their ``.grad`` change.
    """
    if not isinstance(state, Tensor) or not state.requires_grad:
        raise ShapeError("grad_wrt_input: state must be a Tensor with requires_grad=True")
    loss_fn = loss_kind if callable(loss_kind) else (lambda p, t: loss(p, t, loss_kind))
    state.grad = None
    with frozen(model.parameters()):
        out = model(state)
        value = loss_fn(out, as_tensor(target))
        if not value.requires_grad:
            return np.zeros_like(state.data)
        value.backward()
    grad = state.grad
    state.grad = None
    return grad
