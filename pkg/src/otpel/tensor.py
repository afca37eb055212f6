"""Dense float64 tensors with reverse-mode automatic differentiation.

Each operation records its parents and a closure that maps the output
gradient to one gradient per parent. ``Tensor.backward`` walks the recorded
graph once in reverse topological order and accumulates into the ``grad`` of
leaf tensors that have ``requires_grad`` set.

The op set is deliberately small: what the backbone, the PEL layers and the
distance estimators need, plus the finite-difference oracle used to check it.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "conv1d",
    "layer_norm",
    "concat",
    "gelu",
    "relu",
    "finite_diff_grad",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
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


class Tensor:
    """A node in the differentiation graph.

    Leaves are created directly; every other tensor is the output of an op and
    keeps a reference to its parents until the graph is garbage collected.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------

    @classmethod
    def _make(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- elementwise arithmetic -----------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._make(self.data - other.data, (self, other), backward)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        need_a, need_b = self.requires_grad, other.requires_grad

        def backward(g):
            return (
                _unbroadcast(g * b, a.shape) if need_a else None,
                _unbroadcast(g * a, b.shape) if need_b else None,
            )

        return Tensor._make(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a / b, (self, other), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        p = float(exponent)
        x = self.data

        def backward(g):
            if p == 2.0:
                return (g * 2.0 * x,)
            return (g * p * np.power(x, p - 1.0),)

        out = x * x if p == 2.0 else np.power(x, p)
        return Tensor._make(out, (self,), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    def abs(self):
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def sqrt(self):
        """Square root whose gradient at exactly zero is taken as zero."""
        out = np.sqrt(np.maximum(self.data, 0.0))

        def backward(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0)
            return (g * d,)

        return Tensor._make(out, (self,), backward)

    def clamp_min(self, floor: float):
        x = self.data
        mask = x > floor
        return Tensor._make(np.where(mask, x, floor), (self,), lambda g: (g * mask,))

    # -- reductions -----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        if n == 0:
            raise ContractError("mean over an empty axis")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation ---------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or None
        if axes is None:
            inverse = None
        else:
            inverse = tuple(np.argsort(axes))
        return Tensor._make(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inverse),)
        )

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, index):
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), backward)

    def take_along_axis(self, indices: np.ndarray, axis: int):
        """Gather with ``np.take_along_axis``; used to differentiate through sorts."""
        indices = np.asarray(indices)
        shape = self.shape

        grid = list(np.ix_(*[np.arange(n) for n in indices.shape]))
        grid[axis] = indices
        grid = tuple(grid)

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, grid, g)
            return (full,)

        return Tensor._make(np.take_along_axis(self.data, indices, axis=axis), (self,), backward)

    # -- activations ----------------------------------------------------

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    # -- differentiation ------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable trainable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
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
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological_order(root: Tensor) -> list:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- free-function ops ---------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    x, y = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        return (g @ y.T if need_a else None), (x.T @ g if need_b else None)

    return Tensor._make(x @ y, (a, b), backward)


def _conv_index(lengths, width: int) -> np.ndarray:
    """Row index per (offset, frame); ``total`` marks a zero-padding row.

    Padding is applied at both ends of every segment, so concatenated
    utterances never see each other's frames.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    total = int(lengths.sum())
    starts = np.repeat(np.cumsum(lengths) - lengths, lengths)
    ends = np.repeat(np.cumsum(lengths), lengths)
    rows = np.arange(total)
    half = width // 2
    index = np.empty((width, total), dtype=np.int64)
    for k in range(width):
        src = rows + (k - half)
        index[k] = np.where((src >= starts) & (src < ends), src, total)
    return index


def conv1d(x, kernel, bias=None, lengths=None) -> Tensor:
    """Same-padded cross-correlation along the frame axis.

    ``x`` is [frames x ch_in], ``kernel`` is [width x ch_in x ch_out] with odd
    width; output is [frames x ch_out]. Zero padding at both ends. When
    ``lengths`` is given, ``x`` holds several sequences stacked along frames
    and each is padded separately.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d kernel must be [width x ch_in x ch_out], got {kernel.shape}")
    width, ch_in, ch_out = kernel.shape
    if width % 2 == 0:
        raise ConfigError(f"conv1d width must be odd for same padding, got {width}")
    if x.ndim != 2 or x.shape[1] != ch_in:
        raise ShapeError(f"conv1d input {x.shape} does not match kernel {kernel.shape}")
    frames = x.shape[0]
    if lengths is None:
        lengths = [frames]
    elif int(np.sum(lengths)) != frames:
        raise ShapeError(f"segment lengths sum to {int(np.sum(lengths))}, input has {frames} frames")
    index = _conv_index(lengths, width)
    extended = np.concatenate([x.data, np.zeros((1, ch_in))])
    cols = np.concatenate([extended[index[k]] for k in range(width)], axis=1)
    flat = kernel.data.reshape(width * ch_in, ch_out)
    out = cols @ flat

    need_x, need_k = x.requires_grad, kernel.requires_grad

    def backward(g):
        d_kernel = (cols.T @ g).reshape(width, ch_in, ch_out) if need_k else None
        if not need_x:
            return None, d_kernel
        d_cols = g @ flat.T
        d_ext = np.zeros((frames + 1, ch_in))
        for k in range(width):
            # within one offset every real row appears at most once
            d_ext[index[k]] += d_cols[:, k * ch_in : (k + 1) * ch_in]
        return d_ext[:frames], d_kernel

    result = Tensor._make(out, (x, kernel), backward)
    if bias is not None:
        result = result + bias
    return result


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Standardize each row of ``x`` to zero mean and unit variance."""
    x = as_tensor(x)
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    centered = data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    n = data.shape[-1]

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    if n == 0:
        raise ShapeError("layer_norm over a zero-width feature axis")
    return Tensor._make(xhat, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh approximation of GELU."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return Tensor._make(out, (x,), backward)


def finite_diff_grad(f, x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a fresh constant ``Tensor`` per evaluation and must return a
    scalar (``Tensor`` or float).
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(values):
        with no_grad():
            out = f(Tensor(values.reshape(base.shape)))
        return float(out.item() if isinstance(out, Tensor) else out)

    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        up = evaluate(bumped)
        bumped[i] = flat[i] - eps
        down = evaluate(bumped)
        gflat[i] = (up - down) / (2.0 * eps)
    return grad
