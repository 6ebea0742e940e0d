"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and records the operations applied to it,
so a scalar loss can call :meth:`Tensor.backward` and every parameter that
participated in the computation receives its gradient.  The graph is
feed-forward only: each op creates a fresh node, and ``backward`` walks the
nodes in reverse topological order exactly once.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class GraphError(RuntimeError):
    """Raised when backward is requested on a graph that cannot provide it."""


def _as_array(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcasted gradient back to the operand's original shape."""
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
    """A node in the computation graph holding a float64 array and its grad."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[Array], None] | None = None,
    ):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    # ------------------------------------------------------------------
    # basic introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # ------------------------------------------------------------------
    # graph construction helpers
    # ------------------------------------------------------------------
    @staticmethod
    def _lift(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def _make(self, data: Array, parents: tuple["Tensor", ...], backward) -> "Tensor":
        return Tensor(data, _parents=parents, _backward=backward)

    def _accumulate(self, grad: Array) -> None:
        grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        out_data = self.data + other.data

        def backward(g: Array) -> None:
            self._accumulate(g)
            other._accumulate(g)

        return self._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def backward(g: Array) -> None:
            self._accumulate(-g)

        return self._make(-self.data, (self,), backward)

    def __sub__(self, other) -> "Tensor":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        out_data = self.data * other.data

        def backward(g: Array) -> None:
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)

        return self._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._lift(other)
        out_data = self.data / other.data

        def backward(g: Array) -> None:
            self._accumulate(g / other.data)
            other._accumulate(-g * self.data / (other.data * other.data))

        return self._make(out_data, (self, other), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return self._lift(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        out_data = self.data**exponent

        def backward(g: Array) -> None:
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return self._make(out_data, (self,), backward)

    def __matmul__(self, other) -> "Tensor":
        other = self._lift(other)
        out_data = self.data @ other.data

        def backward(g: Array) -> None:
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 1:  # inner product
                self._accumulate(g * b)
                other._accumulate(g * a)
            elif b.ndim == 1:
                self._accumulate(np.multiply.outer(g, b))
                other._accumulate(np.tensordot(g, a, axes=(range(g.ndim), range(g.ndim))))
            elif a.ndim == 1:
                self._accumulate(g @ b.T)
                other._accumulate(np.multiply.outer(a, g))
            else:
                self._accumulate(g @ np.swapaxes(b, -1, -2))
                other._accumulate(np.swapaxes(a, -1, -2) @ g)

        return self._make(out_data, (self, other), backward)

    # ------------------------------------------------------------------
    # reductions and reshaping
    # ------------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g: Array) -> None:
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape))
            else:
                g_exp = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g_exp, self.data.shape))

        return self._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        original = self.data.shape

        def backward(g: Array) -> None:
            self._accumulate(g.reshape(original))

        return self._make(out_data, (self,), backward)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        out_data = np.transpose(self.data, axes)
        inv = None if axes is None else np.argsort(axes)

        def backward(g: Array) -> None:
            self._accumulate(np.transpose(g, inv))

        return self._make(out_data, (self,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        out_data = self.data[index]

        def backward(g: Array) -> None:
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            self._accumulate(full)

        return self._make(out_data, (self,), backward)

    # ------------------------------------------------------------------
    # elementwise nonlinearities
    # ------------------------------------------------------------------
    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def backward(g: Array) -> None:
            self._accumulate(g * out_data)

        return self._make(out_data, (self,), backward)

    def log(self) -> "Tensor":
        out_data = np.log(self.data)

        def backward(g: Array) -> None:
            self._accumulate(g / self.data)

        return self._make(out_data, (self,), backward)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def backward(g: Array) -> None:
            self._accumulate(g * (1.0 - out_data * out_data))

        return self._make(out_data, (self,), backward)

    def sigmoid(self) -> "Tensor":
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g: Array) -> None:
            self._accumulate(g * out_data * (1.0 - out_data))

        return self._make(out_data, (self,), backward)

    def relu(self) -> "Tensor":
        mask = self.data > 0
        out_data = np.where(mask, self.data, 0.0)

        def backward(g: Array) -> None:
            self._accumulate(g * mask)

        return self._make(out_data, (self,), backward)

    def abs(self) -> "Tensor":
        out_data = np.abs(self.data)
        sign = np.sign(self.data)

        def backward(g: Array) -> None:
            self._accumulate(g * sign)

        return self._make(out_data, (self,), backward)

    def clip(self, lo: float, hi: float) -> "Tensor":
        """Clamp values into [lo, hi]; gradient is zero outside the window."""
        out_data = np.clip(self.data, lo, hi)
        mask = (self.data >= lo) & (self.data <= hi)

        def backward(g: Array) -> None:
            self._accumulate(g * mask)

        return self._make(out_data, (self,), backward)

    def dropout(self, rate: float, rng: np.random.Generator) -> "Tensor":
        """Inverted dropout; the caller owns the rng for reproducibility."""
        if rate <= 0.0:
            return self
        keep = (rng.random(self.data.shape) >= rate) / (1.0 - rate)
        out_data = self.data * keep

        def backward(g: Array) -> None:
            self._accumulate(g * keep)

        return self._make(out_data, (self,), backward)

    # ------------------------------------------------------------------
    # backward driver
    # ------------------------------------------------------------------
    def backward(self, seed: Array | None = None) -> None:
        """Backpropagate from this node.

        ``seed`` defaults to ones (the usual case is a scalar loss).  Raises
        :class:`GraphError` when called on a node that recorded no graph.
        """
        if self._backward is None and not self._parents:
            raise GraphError("backward called on a leaf with no recorded graph")
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = _as_array(seed)
            if seed.shape != self.data.shape:
                raise GraphError(
                    f"seed shape {seed.shape} does not match output shape {self.data.shape}"
                )

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = seed.copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None


# ----------------------------------------------------------------------
# free functions
# ----------------------------------------------------------------------
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis`` with gradient routing."""
    tensors = [Tensor._lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return Tensor(out_data, _parents=tuple(tensors), _backward=backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([t.reshape(*(t.shape[:axis] + (1,) + t.shape[axis:])) for t in tensors], axis=axis)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation, valid padding, stride 1.

    ``x`` is (batch, in_ch, H, W) and ``kernel`` is (out_ch, in_ch, kh, kw);
    the output is (batch, out_ch, H-kh+1, W-kw+1).
    """
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4 or xd.shape[1] != kd.shape[1]:
        raise ValueError(
            f"conv2d expects (B,C,H,W) input and (O,C,kh,kw) kernel, got {xd.shape} and {kd.shape}"
        )
    kh, kw = kd.shape[2], kd.shape[3]
    windows = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    # tensordot instead of einsum: these arrays are tiny and einsum's path
    # search would dominate the runtime
    out_data = np.moveaxis(np.tensordot(windows, kd, axes=([1, 4, 5], [1, 2, 3])), 3, 1)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    def backward(g: Array) -> None:
        kernel._accumulate(np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])))
        padded = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gw = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
        flipped = np.ascontiguousarray(kd[:, :, ::-1, ::-1])
        x._accumulate(np.moveaxis(np.tensordot(gw, flipped, axes=([1, 4, 5], [0, 2, 3])), 3, 1))
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor(out_data, _parents=parents, _backward=backward)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route to the first cell in row-major order."""
    xd = x.data
    b, c, h, w = xd.shape
    if h % size or w % size:
        raise ValueError(f"maxpool2d: spatial dims {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    blocks = xd.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(b, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)  # argmax takes the first maximum: row-major tie-break
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g: Array) -> None:
        grad_flat = np.zeros_like(flat)
        np.put_along_axis(grad_flat, arg[..., None], g[..., None], axis=-1)
        grad = (
            grad_flat.reshape(b, c, ho, wo, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h, w)
        )
        x._accumulate(grad)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def gather_rows(x: Tensor, index: Array) -> Tensor:
    """Select rows by integer index (used for differentiable sorting)."""
    index = np.asarray(index)
    out_data = x.data[index]

    def backward(g: Array) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    diff = pred - Tensor._lift(target)
    return (diff * diff).mean()


def bce_loss(prob: Tensor, target, eps: float = 1e-12) -> Tensor:
    """Binary cross entropy on probabilities in (0, 1)."""
    t = Tensor._lift(target)
    p = prob.clip(eps, 1.0 - eps)
    return -(t * p.log() + (1.0 - t) * (1.0 - p).log()).mean()


def parameters_of(items: Iterable) -> list[Tensor]:
    """Flatten anything exposing ``.parameters()`` or being a Tensor into a list."""
    params: list[Tensor] = []
    for item in items:
        if isinstance(item, Tensor):
            params.append(item)
        else:
            params.extend(item.parameters())
    return params
