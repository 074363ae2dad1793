"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad`` records its inputs
and a backward rule on the output node. :func:`backward` walks the recorded
graph in reverse topological order, so each recorded use of a tensor
contributes its gradient exactly once. Leaf gradients accumulate additively
until :func:`zero_grad` clears them.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericalError, ValidationError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced a non-finite value")
    return data


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that can participate in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_spent")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        if any(extent < 1 for extent in arr.shape):
            raise DimensionError(f"every extent must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None
        self._op = ""
        self._spent = False

    @classmethod
    def _result(cls, data, parents, backward, op) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _check_finite(np.asarray(data, dtype=np.float64), op)
        out.grad = None
        out._op = op
        out._spent = False
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def rule(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._result(self.data + other.data, (self, other), rule, "add")

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def rule(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._result(self.data - other.data, (self, other), rule, "sub")

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def rule(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._result(a * b, (self, other), rule, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if np.any(b == 0):
            raise NumericalError("division by zero")

        def rule(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._result(a / b, (self, other), rule, "div")

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0):
            raise NumericalError("sqrt of a negative value")
        root = np.sqrt(self.data)

        def rule(g):
            return (g / (2.0 * root),)

        return Tensor._result(root, (self,), rule, "sqrt")

    # -- reductions and reshaping ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def rule(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), rule, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(str(exc)) from None
        return Tensor._result(data, (self,), lambda g: (g.reshape(original),), "reshape")

    def take(self, indices: Sequence[int]) -> "Tensor":
        """Gather rows along axis 0 (indices may repeat)."""
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 1 or np.any(idx < 0) or np.any(idx >= self.shape[0]):
            raise DimensionError(f"row indices out of range for axis of {self.shape[0]}")
        shape = self.shape

        def rule(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._result(self.data[idx], (self,), rule, "take")


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# -- network operations -----------------------------------------------------


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation as one GEMM over gathered kernel windows."""
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError("conv2d expects a 4-D input and 4-D kernels")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernels.shape
    if Ck != C:
        raise DimensionError(f"input has {C} channels but kernels expect {Ck}")
    if bias.shape != (F,):
        raise DimensionError(f"bias shape {bias.shape} does not match {F} filters")
    if stride < 1 or padding < 0:
        raise ValidationError("stride must be >= 1 and padding >= 0")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError("kernel larger than padded input")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1

    xp = np.zeros((B, H + 2 * padding, W + 2 * padding, C))
    xp[:, padding:padding + H, padding:padding + W, :] = x.data.transpose(0, 2, 3, 1)
    # (B, Ho, Wo, C, kh, kw) view of every receptive field
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    K = kernels.data
    out = np.tensordot(cols, K, axes=([3, 4, 5], [1, 2, 3])) + bias.data

    def rule(g):
        gl = g.transpose(0, 2, 3, 1)
        dK = np.tensordot(gl, cols, axes=([0, 1, 2], [0, 1, 2])) if kernels.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.tensordot(gl, K, axes=([3], [0]))
            dxp = np.zeros_like(xp)
            hs = stride * (Ho - 1) + 1
            ws = stride * (Wo - 1) + 1
            for di in range(kh):
                for dj in range(kw):
                    dxp[:, di:di + hs:stride, dj:dj + ws:stride, :] += dcols[..., di, dj]
            dx = dxp[:, padding:padding + H, padding:padding + W, :].transpose(0, 3, 1, 2)
        return dx, dK, gl.sum(axis=(0, 1, 2))

    return Tensor._result(out.transpose(0, 3, 1, 2), (x, kernels, bias), rule, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def avgpool2d(x: Tensor, window: int) -> Tensor:
    if x.ndim != 4:
        raise DimensionError("avgpool2d expects a 4-D input")
    B, C, H, W = x.shape
    if window < 1 or H % window or W % window:
        raise DimensionError(f"window {window} does not divide spatial size {H}x{W}")
    Ho, Wo = H // window, W // window
    out = x.data.reshape(B, C, Ho, window, Wo, window).mean(axis=(3, 5))
    scale = 1.0 / (window * window)

    def rule(g):
        spread = np.broadcast_to(g[:, :, :, None, :, None] * scale, (B, C, Ho, window, Wo, window))
        return (spread.reshape(B, C, H, W),)

    return Tensor._result(out, (x,), rule, "avgpool2d")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError("dense expects a 2-D input and 2-D weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"input width {x.shape[1]} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    a, w = x.data, weight.data

    def rule(g):
        return g @ w, g.T @ a, g.sum(axis=0)

    return Tensor._result(a @ w.T + bias.data, (x, weight, bias), rule, "dense")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function on plain arrays."""
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_bce_loss(logits: Tensor, targets: ArrayLike) -> Tensor:
    """Mean binary cross-entropy on raw logits, in log-sum-exp form."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValidationError("targets must be exactly 0 or 1")
    z = logits.data
    losses = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def rule(g):
        return (g * (sigmoid(z) - t) / n,)

    return Tensor._result(losses.mean(), (logits,), rule, "sigmoid_bce_loss")


# -- graph traversal --------------------------------------------------------


def _topological_order(root: Tensor):
    order, seen = [], set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    The graph is released afterwards; calling again on the same loss raises.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise ContractError("backward already ran on this loss; rebuild the graph first")
    if not loss.requires_grad:
        raise ContractError("loss was not recorded against any tensor requiring grad")
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None
    loss._spent = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_difference_gradient(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference estimate of the gradient of scalar ``f`` at ``point``."""
    if h <= 0:
        raise ValidationError("h must be positive")
    base = np.array(point.data, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)

    def evaluate(values):
        with no_grad():
            result = f(Tensor(values.reshape(base.shape)))
        return result.item() if isinstance(result, Tensor) else float(result)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate(flat)
        flat[i] = orig - h
        down = evaluate(flat)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return Tensor(out.reshape(base.shape))


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise ``|a - n| / max(|a|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), floor)))
