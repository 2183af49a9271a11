"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation appends a node to the active :class:`Tape`.
Nodes are stored in creation order, which is already a topological order, so
``backward`` simply walks the tape in reverse once.

Multiply-accumulate counting for matmuls and convolutions is exposed through
:func:`count_macs`, which the profiler uses as an independent oracle.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonDeterminismError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Append-only record of operations for one execution stream."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.generation = 0

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], backward_fn) -> None:
        out.node = len(self.nodes)
        out._tape = self
        out._generation = self.generation
        self.nodes.append((out, parents, backward_fn))

    def reset(self) -> None:
        self.nodes.clear()
        self.generation += 1

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def reset_tape() -> None:
    get_tape().reset()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


# ---------------------------------------------------------------------------
# MAC accounting


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates issued by matmul and convolution kernels.

    Yields a one-element list whose entry is updated in place.
    """
    prev = getattr(_local, "mac_counter", None)
    counter = [0]
    _local.mac_counter = counter
    try:
        yield counter
    finally:
        _local.mac_counter = prev


def _add_macs(n: int) -> None:
    counter = getattr(_local, "mac_counter", None)
    if counter is not None:
        counter[0] += int(n)


# ---------------------------------------------------------------------------
# verification mode


def _verify_enabled() -> bool:
    return getattr(_local, "verify", False)


@contextlib.contextmanager
def verification_mode():
    """Assert finiteness of every forward result while active."""
    prev = _verify_enabled()
    _local.verify = True
    try:
        yield
    finally:
        _local.verify = prev


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """n-dimensional real array with optional tape linkage."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and type(data) is np.ndarray and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype)
            if dtype is None and arr.dtype.kind != "f":
                arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self._tape: Tape | None = None
        self._generation = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result and record it when any parent needs a gradient."""
    out = Tensor(data)
    if _verify_enabled() and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError("non-finite value produced from finite inputs")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        get_tape().record(out, tuple(parents), backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise binary


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}


def binary_elementwise(a, b, kind: str) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype)
    a, b = as_tensor(a), as_tensor(b)
    if kind not in _BINARY:
        raise ValueError(f"unknown binary op {kind!r}")
    try:
        data = _BINARY[kind](a.data, b.data)
    except ValueError:
        raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}") from None

    if kind == "add":

        def backward(g):
            return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    elif kind == "sub":

        def backward(g):
            return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    elif kind == "mul":

        def backward(g):
            return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    else:

        def backward(g):
            return (
                unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

    return _make(data, (a, b), backward)


def add(a, b):
    return binary_elementwise(a, b, "add")


def sub(a, b):
    return binary_elementwise(a, b, "sub")


def mul(a, b):
    return binary_elementwise(a, b, "mul")


def div(a, b):
    return binary_elementwise(a, b, "div")


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape} x {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch prefixes differ: {a.shape} x {b.shape}") from None
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _add_macs(math.prod(batch) * m * k * n)
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), backward)


# ---------------------------------------------------------------------------
# unary


def unary(x, kind: str, c: float | None = None) -> Tensor:
    x = as_tensor(x)
    d = x.data
    if kind == "exp":
        data = np.exp(d)

        def backward(g):
            return (g * data,)

    elif kind == "log":
        if np.any(d <= 0):
            raise DomainError("log of non-positive input")
        data = np.log(d)

        def backward(g):
            return (g / d,)

    elif kind == "sigmoid":
        data = special.expit(d)

        def backward(g):
            return (g * data * (1.0 - data),)

    elif kind == "tanh":
        data = np.tanh(d)

        def backward(g):
            return (g * (1.0 - data * data),)

    elif kind == "erf":
        data = special.erf(d)

        def backward(g):
            return (g * (2.0 / np.sqrt(np.pi)) * np.exp(-d * d),)

    elif kind == "relu":
        data = np.maximum(d, 0.0)

        def backward(g):
            return (g * (d > 0),)

    elif kind == "neg":
        data = -d

        def backward(g):
            return (-g,)

    elif kind == "scale":
        if c is None:
            raise ValueError("scale requires a constant")
        data = d * c

        def backward(g):
            return (g * c,)

    elif kind == "rsqrt":
        if np.any(d <= 0):
            raise DomainError("rsqrt of non-positive input")
        data = 1.0 / np.sqrt(d)

        def backward(g):
            return (-0.5 * g * data / d,)

    else:
        raise ValueError(f"unknown unary op {kind!r}")
    return _make(data.astype(d.dtype, copy=False), (x,), backward)


def exp(x):
    return unary(x, "exp")


def log(x):
    return unary(x, "log")


def sigmoid(x):
    return unary(x, "sigmoid")


def tanh(x):
    return unary(x, "tanh")


def erf(x):
    return unary(x, "erf")


def relu(x):
    return unary(x, "relu")


def neg(x):
    return unary(x, "neg")


def scale(x, c: float):
    return unary(x, "scale", c)


def rsqrt(x):
    return unary(x, "rsqrt")


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def reduce(x, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes], dtype=np.int64)) if axes else 1

    def expand(g):
        return g if keepdims else np.expand_dims(g, axes)

    if kind == "sum":
        data = x.data.sum(axis=axes, keepdims=keepdims)

        def backward(g):
            return (np.broadcast_to(expand(g), x.shape).copy(),)

    elif kind == "mean":
        data = x.data.mean(axis=axes, keepdims=keepdims)

        def backward(g):
            return (np.broadcast_to(expand(g) / n, x.shape).copy(),)

    elif kind == "max":
        kept = x.data.max(axis=axes, keepdims=True)
        data = kept if keepdims else np.squeeze(kept, axis=axes)
        # route the gradient to one argmax per reduced slice
        dest = tuple(range(x.ndim - len(axes), x.ndim))
        moved = np.moveaxis(x.data, axes, dest)
        flat = moved.reshape(moved.shape[: x.ndim - len(axes)] + (-1,))
        hit = np.zeros_like(flat, dtype=bool)
        np.put_along_axis(hit, flat.argmax(axis=-1)[..., None], True, axis=-1)
        hit = np.moveaxis(hit.reshape(moved.shape), dest, axes)

        def backward(g):
            return (np.where(hit, expand(g), 0.0),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _make(np.asarray(data), (x,), backward)


def reduce_sum(x, axis=None, keepdims=False):
    return reduce(x, axis, "sum", keepdims)


def reduce_mean(x, axis=None, keepdims=False):
    return reduce(x, axis, "mean", keepdims)


def reduce_max(x, axis=None, keepdims=False):
    return reduce(x, axis, "max", keepdims)


# ---------------------------------------------------------------------------
# structural


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(data, (x,), backward)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(data, (x,), backward)


def swapaxes(x, a: int, b: int) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    data = x.data[index]

    idx = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (np.ndarray, list)) for i in idx)

    def backward(g):
        out = np.zeros_like(x.data)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _make(np.array(data), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(data, tuple(tensors), backward)


def split(x, parts: int = 2, axis: int = -1) -> list[Tensor]:
    """Split ``x`` into ``parts`` equal, order-preserving pieces along ``axis``."""
    x = as_tensor(x)
    extent = x.shape[axis]
    if extent % parts:
        raise ShapeError(f"cannot split extent {extent} into {parts} equal parts")
    step = extent // parts
    ax = axis % x.ndim
    out = []
    for i in range(parts):
        index = [slice(None)] * x.ndim
        index[ax] = slice(i * step, (i + 1) * step)
        out.append(getitem(x, tuple(index)))
    return out


def concat_split(x, axis: int = -1, kind: str = "split", parts: int = 2):
    if kind == "split":
        return split(x, parts, axis)
    if kind == "concat":
        return concat(x, axis)
    raise ValueError(f"unknown kind {kind!r}")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(data, tuple(tensors), backward)


def pad(x, widths: Sequence[tuple[int, int]], value: float = 0.0) -> Tensor:
    x = as_tensor(x)
    data = np.pad(x.data, widths, constant_values=value)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))

    def backward(g):
        return (g[index],)

    return _make(data, (x,), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)

    def backward(g):
        return (
            unbroadcast(np.where(cond, g, 0.0), a.shape),
            unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return _make(data, (a, b), backward)


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    data = np.where(mask, value, x.data)

    def backward(g):
        return (np.where(mask, 0.0, g),)

    return _make(data, (x,), backward)


def take_along_axis(x, indices: np.ndarray, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    indices = np.asarray(indices)
    data = np.take_along_axis(x.data, indices, axis=axis)

    def backward(g):
        out = np.zeros_like(x.data)
        ax = axis % x.ndim
        grid = list(np.indices(indices.shape, sparse=True))
        grid[ax] = indices
        np.add.at(out, tuple(grid), g)
        return (out,)

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# fused numerics


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Log-sum-exp that tolerates all ``-inf`` slices (result ``-inf``, zero grad)."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.exp(x.data - safe_m).sum(axis=axis, keepdims=True)) + safe_m
    data = s if keepdims else np.squeeze(s, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(x.data - s)
        w = np.where(np.isfinite(s), w, 0.0)
        return (gk * w,)

    return _make(data, (x,), backward)


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is True get weight exactly 0.

    Every slice must keep at least one unmasked entry.
    """
    x = as_tensor(x)
    if mask is None:
        z = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        kept = np.where(mask, -np.inf, x.data)
        z = kept - kept.max(axis=axis, keepdims=True)
        e = np.where(mask, 0.0, np.exp(z))
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (data * (g - (g * data).sum(axis=axis, keepdims=True)),)

    return _make(data, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _make(data, (x,), backward)


def layer_norm(x, gain, shift, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    x, gain, shift = as_tensor(x), as_tensor(gain, x.dtype), as_tensor(shift, x.dtype)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm: width {d} vs gain {gain.shape} and shift {shift.shape}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gain.data + shift.data, (x, gain, shift), backward)


def depthwise_conv1d(x, kernel, bias=None) -> Tensor:
    """Same-length per-channel convolution over axis -2 of ``x[..., T, C]``.

    ``kernel`` has shape ``(C, k)`` with ``k`` odd; zero padding ``(k-1)/2``
    on both sides. Computes a cross-correlation, as deep-learning toolkits do.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    channels, k = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"depthwise kernel size must be odd, got {k}")
    if x.shape[-1] != channels:
        raise ShapeError(f"depthwise conv: input {x.shape} vs kernel {kernel.shape}")
    T = x.shape[-2]
    half = (k - 1) // 2
    _add_macs(x.size * k)
    widths = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, widths)
    w = kernel.data
    data = np.zeros_like(x.data)
    for j in range(k):
        data += xp[..., j : j + T, :] * w[:, j]
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        data = data + bias.data
        parents.append(bias)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[..., j : j + T, :] += g * w[:, j]
            gx = gp[..., half : half + T, :]
        if kernel.requires_grad:
            gw = np.empty_like(w)
            lead = tuple(range(x.ndim - 1))
            for j in range(k):
                gw[:, j] = (g * xp[..., j : j + T, :]).sum(axis=lead)
        grads = [gx, gw]
        if bias is not None:
            grads.append(unbroadcast(g, bias.shape))
        return tuple(grads)

    return _make(data, tuple(parents), backward)


def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D convolution, ``x[B, C, H, W]``, ``weight[O, C, kh, kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input channels {C} vs weight {weight.shape}")
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {kh}x{kw}")
    _add_macs(B * O * Ho * Wo * C * kh * kw)
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]  # B C Ho Wo kh kw
    data = np.einsum("bchwij,ocij->bohw", win, weight.data, optimize=True)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        data = data + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gx = gw = None
        if weight.requires_grad:
            gw = np.einsum("bohw,bchwij->ocij", g, win, optimize=True)
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.einsum("bohw,oc->bchw", g, weight.data[:, :, i, j], optimize=True)
                    gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += contrib
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(data, tuple(parents), backward)


# ---------------------------------------------------------------------------
# backward and gradient checking


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``; accumulate into leaf ``.grad``.

    Returns a map from each leaf tensor that received a gradient to that
    gradient. The tape is left intact; call :func:`reset_tape` between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves: dict[Tensor, np.ndarray] = {}
    if loss.node is None:
        if loss.requires_grad:
            leaves[loss] = np.ones_like(loss.data)
            loss.grad = leaves[loss] if loss.grad is None else loss.grad + leaves[loss]
            return leaves
        raise TapeError("backward on a tensor that is not on the tape")
    tape = loss._tape
    if tape is None or loss._generation != tape.generation:
        raise TapeError("backward on a detached tensor (tape was reset)")

    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for idx in range(loss.node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        _, parents, fn = tape.nodes[idx]
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is not None and parent._tape is tape and parent._generation == tape.generation:
                prev = grads.get(parent.node)
                grads[parent.node] = pg if prev is None else prev + pg
            else:
                prev = leaves.get(parent)
                leaves[parent] = pg if prev is None else prev + pg
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """``|a-b| / max(|a|, |b|, floor)``, defined as 0 when both are below 1e-12."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    both_tiny = (np.abs(a) < 1e-12) & (np.abs(b) < 1e-12)
    return np.where(both_tiny, 0.0, err)


# At eps=1e-5 float64 central differences through a full layer carry roundoff
# near 1e-10 * |f| (cancellation amplifies the 1e-11 machine-epsilon estimate).
# Gradient components below FD_FLOOR * |f| are compared on an absolute basis
# so that this noise cannot masquerade as a relative error.
FD_FLOOR = 1e-5


def grad_check(
    f: Callable[[], Tensor],
    inputs: Iterable[Tensor],
    eps: float = 1e-5,
    floor: float | None = None,
) -> float:
    """Worst relative error between tape and central-difference gradients.

    ``f`` takes no arguments and closes over ``inputs``, whose ``data`` is
    perturbed in place. It must return a scalar tensor. ``floor`` bounds the
    relative-error denominator from below; it defaults to
    ``FD_FLOOR * max(1, |f|)``.
    """
    inputs = list(inputs)
    reset_tape()
    first = f()
    again = f()
    if first.data.tobytes() != again.data.tobytes():
        raise NonDeterminismError("function gave different results on repeated evaluation")
    if floor is None:
        floor = FD_FLOOR * max(1.0, abs(float(first.item())))
    reset_tape()
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    reset_tape()

    worst = 0.0
    with no_grad():
        for t, an in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                worst = max(worst, float(relative_error(an_flat[i], numeric, floor)))
    for t in inputs:
        t.grad = None
    return float(worst)
