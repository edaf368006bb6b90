"""Reverse-mode autodiff on dense numpy arrays.

The graph is recorded eagerly: every operation returns a new Tensor that
remembers its parents and a closure computing parent gradients from its own.
`backward()` walks the graph once in reverse topological order and
*accumulates* into `.grad`, so calling it twice without zeroing doubles the
gradients (callers zero by assigning `grad = None`).

Layout conventions:
  - activations for convolution / pooling are NHWC (batch, height, width,
    channels); see `conv2d_nhwc`.
  - convolution weights are OIHW: (out_channels, in_channels, kh, kw).

The convolution and pooling inner kernels are delegated to torch's CPU
functional ops through zero-copy views (an NHWC numpy array is exactly a
channels-last NCHW torch tensor). Everything else is numpy. Kernels are
pinned to one thread per process: parallelism in this package happens at
the level of independent training folds, and single-threaded kernels keep
results bit-reproducible regardless of the worker count.

Reductions (sums, softmax normalizers) accumulate in float64 even when the
tensor itself is float32, then round back to the tensor dtype.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError

torch.set_num_threads(1)

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, like=self), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, like=self), scale(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not an engine op; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(value, dtype=dtype))


def _track(*parents: Tensor) -> bool:
    return _grad_enabled and any(p.requires_grad for p in parents)


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    # `own` asserts g is a fresh array this call may keep without copying
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every reachable requires_grad tensor.

    The loss must be a scalar (a single element); gradients accumulate on
    top of whatever is already in `.grad`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- elementwise and linear ops -----------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data + b.data, requires_grad=_track(a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                ga = _unbroadcast(g, a.data.shape)
                _accum(a, ga, own=ga is not g)
            if b.requires_grad:
                gb = _unbroadcast(g, b.data.shape)
                _accum(b, gb, own=gb is not g)
        out._parents = (a, b)
        out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data * b.data, requires_grad=_track(a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape), own=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape), own=True)
        out._parents = (a, b)
        out._backward = bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s, requires_grad=_track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, g * s, own=True)
        out._parents = (a,)
        out._backward = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_track(a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T, own=True)
            if b.requires_grad:
                _accum(b, a.data.T @ g, own=True)
        out._parents = (a, b)
        out._backward = bw
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.data.shape}")
    out = Tensor(a.data.T, requires_grad=_track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, g.T)
        out._parents = (a,)
        out._backward = bw
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=_track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, g.reshape(a.data.shape))
        out._parents = (a,)
        out._backward = bw
    return out


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), requires_grad=_track(a))
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        def bw(g):
            _accum(a, np.ascontiguousarray(g.transpose(inverse)), own=True)
        out._parents = (a,)
        out._backward = bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=_track(*tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(lo, hi)
                    _accum(t, g[tuple(index)])
        out._parents = tuple(tensors)
        out._backward = bw
    return out


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx], requires_grad=_track(a))
    if out.requires_grad:
        def bw(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(a, ga, own=True)
        out._parents = (a,)
        out._backward = bw
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), requires_grad=_track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, g * (a.data > 0), own=True)
        out._parents = (a,)
        out._backward = bw
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, requires_grad=_track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, g * (1.0 - y * y), own=True)
        out._parents = (a,)
        out._backward = bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    # expit via tanh keeps both saturation tails stable
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = Tensor(y, requires_grad=_track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, g * y * (1.0 - y), own=True)
        out._parents = (a,)
        out._backward = bw
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y, requires_grad=_track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, g * y, own=True)
        out._parents = (a,)
        out._backward = bw
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), requires_grad=_track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, g / a.data, own=True)
        out._parents = (a,)
        out._backward = bw
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi), requires_grad=_track(a))
    if out.requires_grad:
        mask = (a.data >= lo) & (a.data <= hi)
        def bw(g):
            _accum(a, g * mask, own=True)
        out._parents = (a,)
        out._backward = bw
    return out


def tsum(a: Tensor) -> Tensor:
    """Full reduction; accumulates in float64 regardless of dtype."""
    val = np.asarray(np.sum(a.data, dtype=np.float64), dtype=a.data.dtype)
    out = Tensor(val, requires_grad=_track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True), own=True)
        out._parents = (a,)
        out._backward = bw
    return out


def tmean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    x = a.data.astype(np.float64, copy=False)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y64 = e / e.sum(axis=axis, keepdims=True)
    y = y64.astype(a.data.dtype, copy=False)
    out = Tensor(y, requires_grad=_track(a))
    if out.requires_grad:
        def bw(g):
            dot = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(a.data.dtype)
            _accum(a, y * (g - dot), own=True)
        out._parents = (a,)
        out._backward = bw
    return out


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    x = a.data.astype(np.float64, copy=False)
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = (shifted - lse).astype(a.data.dtype, copy=False)
    out = Tensor(y, requires_grad=_track(a))
    if out.requires_grad:
        def bw(g):
            gsum = np.sum(g, axis=axis, keepdims=True, dtype=np.float64).astype(a.data.dtype)
            _accum(a, g - np.exp(y) * gsum, own=True)
        out._parents = (a,)
        out._backward = bw
    return out


# -- convolution / pooling kernels (torch-backed) ------------------------


def _as_torch_nchw(a: np.ndarray) -> torch.Tensor:
    # NHWC numpy buffer == channels-last NCHW torch tensor; zero copy
    return torch.from_numpy(a).permute(0, 3, 1, 2)


def _as_numpy_nhwc(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.permute(0, 2, 3, 1).numpy())


def conv2d_nhwc(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                stride: int = 1, padding: int = 0, name: str = "conv2d") -> Tensor:
    """2-D cross-correlation. x is NHWC, weight is OIHW, output NHWC."""
    if x.data.ndim != 4:
        raise DimensionError(f"{name}: input must be 4-D NHWC, got {x.data.shape}")
    if weight.data.ndim != 4:
        raise DimensionError(f"{name}: weight must be 4-D OIHW, got {weight.data.shape}")
    if x.data.shape[3] != weight.data.shape[1]:
        raise DimensionError(
            f"{name}: input channels {x.data.shape} do not match weight {weight.data.shape}")
    kh = weight.data.shape[2]
    if x.data.shape[1] + 2 * padding < kh or x.data.shape[2] + 2 * padding < weight.data.shape[3]:
        raise DimensionError(
            f"{name}: spatial input {x.data.shape} smaller than kernel {weight.data.shape}")
    bt = torch.from_numpy(bias.data) if bias is not None else None
    with torch.no_grad():
        yt = F.conv2d(_as_torch_nchw(x.data), torch.from_numpy(weight.data), bt,
                      stride=stride, padding=padding)
    out = Tensor(_as_numpy_nhwc(yt),
                 requires_grad=_track(x, weight) or (bias is not None and _track(bias)))
    if out.requires_grad:
        def bw(g):
            need_x = x.requires_grad
            need_w = weight.requires_grad
            need_b = bias is not None and bias.requires_grad
            with torch.no_grad():
                gi, gw, gb = torch.ops.aten.convolution_backward(
                    _as_torch_nchw(g), _as_torch_nchw(x.data),
                    torch.from_numpy(weight.data),
                    [weight.data.shape[0]] if bias is not None else None,
                    [stride, stride], [padding, padding], [1, 1], False, [0, 0], 1,
                    [need_x, need_w, need_b])
            if need_w:
                _accum(weight, np.ascontiguousarray(gw.numpy()), own=True)
            if need_b:
                _accum(bias, np.ascontiguousarray(gb.numpy()), own=True)
            if need_x:
                _accum(x, _as_numpy_nhwc(gi), own=True)
        out._parents = (x, weight) if bias is None else (x, weight, bias)
        out._backward = bw
    return out


def maxpool2d_nhwc(x: Tensor, kernel: int = 2, stride: int | None = None,
                   name: str = "maxpool2d") -> Tensor:
    """Max pooling over NHWC input; stride defaults to the kernel size."""
    if x.data.ndim != 4:
        raise DimensionError(f"{name}: input must be 4-D NHWC, got {x.data.shape}")
    stride = kernel if stride is None else stride
    if x.data.shape[1] < kernel or x.data.shape[2] < kernel:
        raise DimensionError(f"{name}: spatial input {x.data.shape} smaller than window {kernel}")
    with torch.no_grad():
        yt, idx = F.max_pool2d(_as_torch_nchw(x.data), kernel, stride, return_indices=True)
    out = Tensor(_as_numpy_nhwc(yt), requires_grad=_track(x))
    if out.requires_grad:
        h, w = x.data.shape[1], x.data.shape[2]
        def bw(g):
            with torch.no_grad():
                gx = F.max_unpool2d(_as_torch_nchw(g), idx, kernel, stride,
                                    output_size=(h, w))
            _accum(x, _as_numpy_nhwc(gx), own=True)
        out._parents = (x,)
        out._backward = bw
    return out


def flatten_nchw(x: Tensor) -> Tensor:
    """Flatten NHWC activations to (batch, C*H*W) in channel-major order.

    Channel-major row-major flattening is the fixed convention between the
    convolutional stack and the first fully connected layer, so checkpoints
    are portable across engines that store activations channels-first.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"flatten expects 4-D NHWC input, got {x.data.shape}")
    n, h, w, c = x.data.shape
    out = Tensor(np.ascontiguousarray(x.data.transpose(0, 3, 1, 2)).reshape(n, c * h * w),
                 requires_grad=_track(x))
    if out.requires_grad:
        def bw(g):
            _accum(x, np.ascontiguousarray(g.reshape(n, c, h, w).transpose(0, 2, 3, 1)), own=True)
        out._parents = (x,)
        out._backward = bw
    return out


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
