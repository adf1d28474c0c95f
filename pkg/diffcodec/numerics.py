"""
Dense tensors with reverse-mode automatic differentiation

A Tensor wraps a float64 numpy array. Ops applied to tensors that require
gradients record a parent link and a backward closure; ``Tensor.backward``
walks the recorded graph in reverse topological order. Graph recording is
controlled per thread (see ``no_grad``), so distinct models can run in
different threads as long as a single graph stays on one thread.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import ndtr

from .errors import NumericsError, ShapeMismatchError

DTYPE = np.float64

# Smallest interval probability used by the rate term; keeps -log2 finite.
MIN_INTERVAL_PROB = 1e-9

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread"""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Row-major float64 array with an optional autodiff record"""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        _check_finite("tensor", self.data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{grad})"

    # Operators
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)

    def silu(self) -> "Tensor":
        return silu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def softmax(self) -> "Tensor":
        return softmax(self)

    def log(self) -> "Tensor":
        return log(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf"""
        if self.data.size != 1:
            raise NumericsError(f"backward: loss must be a scalar, got shape {self.shape}")

        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"{op}: produced non-finite values")


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, [a.shape, b.shape], "not broadcastable") from None


# Elementwise arithmetic

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise NumericsError("div: division by zero")

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result("div", a.data / b.data, (a, b), backward)


def neg(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return _result("neg", -x.data, (x,), lambda g: (-g,))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", [a.shape, b.shape])

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), backward)


# Activations

def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    return _result("relu", np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def _sigmoid(values: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -values))


def sigmoid(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def backward(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return _result("silu", x.data * s, (x,), backward)


def softmax(x: TensorLike) -> Tensor:
    """Softmax over the last axis"""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (x,), backward)


def log(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericsError("log: input must be strictly positive")
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


# Reductions

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tensor_sum(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", np.asarray(y, dtype=DTYPE), (x,), backward)


def mean(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    y = x.data.mean(axis=axes, keepdims=keepdims) if axes else x.data.copy()

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result("mean", np.asarray(y, dtype=DTYPE), (x,), backward)


def mse(a: TensorLike, b: TensorLike) -> Tensor:
    """Mean squared error over all elements"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("mse", [a.shape, b.shape])
    diff = a.data - b.data
    n = max(diff.size, 1)

    def backward(g):
        scaled = g * 2.0 * diff / n
        return scaled, -scaled

    return _result("mse", np.asarray(np.mean(diff * diff), dtype=DTYPE), (a, b), backward)


# Shape ops

def reshape(x: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", [x.shape, tuple(shape)]) from None
    return _result("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[TensorLike], axis: int = 1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concat", [p.shape for p in parts]) from None
    boundaries = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return np.split(g, boundaries, axis=axis)

    return _result("concat", y, parts, backward)


def upsample_nearest(x: TensorLike, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing axes of an NCHW tensor"""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatchError("upsample_nearest", [x.shape], "expected NCHW")
    y = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result("upsample_nearest", y, (x,), backward)


# Piecewise ops used by the clipped surrogate

def clip(x: TensorLike, low: float, high: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data > low) & (x.data < high)
    return _result("clip", np.clip(x.data, low, high), (x,), lambda g: (g * inside,))


def minimum(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    take_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _result("minimum", np.minimum(a.data, b.data), (a, b), backward)


# Convolutions (NCHW activations, zero padding)

def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; weight has layout (out, in, k, k)"""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    shapes = [x.shape, weight.shape] + ([bias.shape] if bias is not None else [])
    if (x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]
            or weight.shape[2] != weight.shape[3]):
        raise ShapeMismatchError("conv2d", shapes)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatchError("conv2d", shapes, "bias must match output channels")
    k = weight.shape[2]
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError("conv2d", shapes, "kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    y = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    y = np.ascontiguousarray(y)

    def backward(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_xp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                grad_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    contrib.transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w]
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _result("conv2d", y, parents, backward)


def conv_transpose2d(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None,
                     stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution; weight has layout (in, out, k, k)"""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    shapes = [x.shape, weight.shape] + ([bias.shape] if bias is not None else [])
    if (x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]
            or weight.shape[2] != weight.shape[3]):
        raise ShapeMismatchError("conv_transpose2d", shapes)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeMismatchError("conv_transpose2d", shapes, "bias must match output channels")
    k = weight.shape[2]
    n, _, h, w = x.shape
    c_out = weight.shape[1]
    full_h = (h - 1) * stride + k + output_padding
    full_w = (w - 1) * stride + k + output_padding
    ho, wo = full_h - 2 * padding, full_w - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError("conv_transpose2d", shapes, "padding removes the whole output")

    full = np.zeros((n, c_out, full_h, full_w), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(x.data, weight.data[:, :, i, j], axes=([1], [0]))
            full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += contrib.transpose(0, 3, 1, 2)
    y = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    y = np.ascontiguousarray(y)

    def backward(g):
        grad_full = np.zeros((n, c_out, full_h, full_w), dtype=DTYPE)
        grad_full[:, :, padding:padding + ho, padding:padding + wo] = g
        grad_x = np.zeros_like(x.data)
        grad_w = np.zeros_like(weight.data)
        for i in range(k):
            for j in range(k):
                g_slice = grad_full[:, :, i:i + stride * h:stride, j:j + stride * w:stride]
                grad_x += np.tensordot(g_slice, weight.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                grad_w[:, :, i, j] = np.tensordot(x.data, g_slice, axes=([0, 2, 3], [0, 2, 3]))
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _result("conv_transpose2d", y, parents, backward)


# Rate term

def interval_bits(z: TensorLike, scale: np.ndarray) -> Tensor:
    """-log2 of the mass a zero-mean Gaussian puts on [|z| - 1/2, |z| + 1/2]

    ``scale`` is a constant array broadcastable against ``z``.
    """
    z = as_tensor(z)
    scale = np.broadcast_to(np.asarray(scale, dtype=DTYPE), z.shape)
    magnitude = np.abs(z.data)
    upper = (0.5 - magnitude) / scale
    lower = (-0.5 - magnitude) / scale
    prob = ndtr(upper) - ndtr(lower)
    floored = prob < MIN_INTERVAL_PROB
    prob = np.maximum(prob, MIN_INTERVAL_PROB)
    bits = -np.log2(prob)

    def backward(g):
        density = (np.exp(-0.5 * lower * lower) - np.exp(-0.5 * upper * upper)) / np.sqrt(2.0 * np.pi)
        dprob_dmag = density / scale
        dbits = -dprob_dmag / (prob * np.log(2.0)) * np.sign(z.data)
        return (np.where(floored, 0.0, g * dbits),)

    return _result("interval_bits", bits, (z,), backward)


# Optimizer

@dataclass
class OptimizerState:
    """Adaptive-moment accumulators for one parameter group"""
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moments: List[np.ndarray] = field(default_factory=list)
    second_moments: List[np.ndarray] = field(default_factory=list)


def optimizer_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
                   state: OptimizerState) -> None:
    """Apply one adaptive-moment update in place

    Every gradient is validated before any parameter changes, so a
    non-finite gradient leaves parameters and state untouched.
    """
    if len(params) != len(grads):
        raise ShapeMismatchError("optimizer_step", [(len(params),), (len(grads),)],
                                 "one gradient per parameter")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeMismatchError("optimizer_step", [p.shape, np.shape(g)])
        if not np.all(np.isfinite(g)):
            raise NumericsError("optimizer_step: non-finite gradient, step refused")

    if not state.first_moments:
        state.first_moments = [np.zeros_like(p.data) for p in params]
        state.second_moments = [np.zeros_like(p.data) for p in params]

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


class Adam:
    """Adaptive-moment optimizer over a fixed parameter list"""

    def __init__(self, params: Iterable[Tensor], lr: float,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        optimizer_step(self.params, grads, self.state)


def gradients(loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of ``loss`` for each parameter; zeros where unreachable"""
    for p in params:
        p.grad = None
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
