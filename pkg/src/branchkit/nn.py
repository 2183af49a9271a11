"""Neural building blocks: linear maps, norms, activations, convolutions.

Parameter bundles are plain dataclasses whose fields are :class:`Tensor`
objects (or nested bundles / lists of bundles). Trainable tensors carry
``requires_grad=True``; running statistics are non-trainable tensors.

Masks are boolean numpy arrays of shape ``[batch, T]`` with True marking
valid frames.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


# ---------------------------------------------------------------------------
# parameter bundles


@dataclasses.dataclass
class LinearParams:
    weight: Tensor  # d_in x d_out
    bias: Tensor | None = None

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"linear weight must be a matrix, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


@dataclasses.dataclass
class LayerNormParams:
    gain: Tensor
    shift: Tensor
    eps: float = 1e-12

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("layer norm eps must be positive")


@dataclasses.dataclass
class BatchNormParams:
    gain: Tensor
    shift: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if not 0 < self.momentum < 1:
            raise ValueError("batch norm momentum must lie in (0, 1)")
        if np.any(self.running_var.data < 0):
            raise ValueError("running variance must be non-negative")


@dataclasses.dataclass
class DepthwiseConvParams:
    kernel: Tensor  # channels x k
    bias: Tensor | None = None

    def __post_init__(self):
        if self.kernel.shape[1] % 2 == 0:
            raise ShapeError(f"depthwise kernel size must be odd, got {self.kernel.shape[1]}")

    @property
    def channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def k(self) -> int:
        return self.kernel.shape[1]


@dataclasses.dataclass
class SubsamplingParams:
    conv1_weight: Tensor  # d x 1 x 3 x 3
    conv1_bias: Tensor
    conv2_weight: Tensor  # d x d x 3 x 3
    conv2_bias: Tensor
    out: LinearParams  # d*f2 -> d


# ---------------------------------------------------------------------------
# parameter traversal


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield every tensor in a parameter bundle, trainable or not, in field order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_tensors(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, item in obj.items():
            yield from named_tensors(item, f"{prefix}.{key}" if prefix else str(key))


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    for name, t in named_tensors(obj, prefix):
        if t.requires_grad:
            yield name, t


def parameter_count(obj) -> int:
    return sum(t.size for _, t in named_parameters(obj))


# ---------------------------------------------------------------------------
# initialisation


def _uniform(rng, shape, bound, dtype):
    return ad.parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def init_linear(rng, d_in: int, d_out: int, bias: bool = True, dtype=np.float64) -> LinearParams:
    bound = 1.0 / math.sqrt(d_in)
    return LinearParams(
        weight=_uniform(rng, (d_in, d_out), bound, dtype),
        bias=_uniform(rng, (d_out,), bound, dtype) if bias else None,
    )


def init_layer_norm(d: int, dtype=np.float64, eps: float = 1e-12) -> LayerNormParams:
    return LayerNormParams(
        gain=ad.parameter(np.ones(d), dtype=dtype),
        shift=ad.parameter(np.zeros(d), dtype=dtype),
        eps=eps,
    )


def init_batch_norm(channels: int, dtype=np.float64) -> BatchNormParams:
    return BatchNormParams(
        gain=ad.parameter(np.ones(channels), dtype=dtype),
        shift=ad.parameter(np.zeros(channels), dtype=dtype),
        running_mean=Tensor(np.zeros(channels, dtype=dtype)),
        running_var=Tensor(np.ones(channels, dtype=dtype)),
    )


def init_depthwise(rng, channels: int, k: int, bias: bool = True, dtype=np.float64) -> DepthwiseConvParams:
    bound = 1.0 / math.sqrt(k)
    return DepthwiseConvParams(
        kernel=_uniform(rng, (channels, k), bound, dtype),
        bias=_uniform(rng, (channels,), bound, dtype) if bias else None,
    )


def subsampled_length(n):
    """Frames left after two valid 3-tap stride-2 convolutions (works on arrays)."""
    n = np.asarray(n)
    return ((n - 3) // 2 + 1 - 3) // 2 + 1


def init_subsampling(rng, feat_dim: int, d: int, dtype=np.float64) -> SubsamplingParams:
    f2 = int(subsampled_length(feat_dim))
    if f2 < 1:
        raise ShapeError(f"feature dim {feat_dim} too small for subsampling")
    b1 = 1.0 / math.sqrt(9)
    b2 = 1.0 / math.sqrt(9 * d)
    return SubsamplingParams(
        conv1_weight=_uniform(rng, (d, 1, 3, 3), b1, dtype),
        conv1_bias=_uniform(rng, (d,), b1, dtype),
        conv2_weight=_uniform(rng, (d, d, 3, 3), b2, dtype),
        conv2_bias=_uniform(rng, (d,), b2, dtype),
        out=init_linear(rng, d * f2, d, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# primitives


def linear(x, p: LinearParams) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != p.d_in:
        raise ShapeError(f"linear: input width {x.shape[-1]} but weight expects {p.d_in}")
    y = ad.matmul(x, p.weight) if x.ndim >= 2 else ad.matmul(x.reshape(1, -1), p.weight).reshape(-1)
    if p.bias is not None:
        y = y + p.bias
    return y


def pointwise_conv(x, p: LinearParams) -> Tensor:
    """A kernel-size-1 convolution over time is a per-frame linear map."""
    return linear(x, p)


def swish(x) -> Tensor:
    return ad.mul(x, ad.sigmoid(x))


def gelu(x) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with Phi built from erf."""
    x = ad.as_tensor(x)
    phi = ad.scale(ad.add(ad.erf(ad.scale(x, 1.0 / math.sqrt(2.0))), 1.0), 0.5)
    return ad.mul(x, phi)


def glu(x) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] % 2:
        raise ShapeError(f"GLU needs an even channel count, got {x.shape[-1]}")
    a, b = ad.split(x, 2, axis=-1)
    return ad.mul(a, ad.sigmoid(b))


def layer_norm(x, p: LayerNormParams) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != p.gain.shape[0]:
        raise ShapeError(f"layer_norm: width {x.shape[-1]} vs params {p.gain.shape[0]}")
    return ad.layer_norm(x, p.gain, p.shift, p.eps)


def _frame_mask(mask, x: Tensor) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:2]:
        raise ShapeError(f"mask {m.shape} does not match input {x.shape}")
    return m[:, :, None]


def batch_norm(x, p: BatchNormParams, mode: str = "eval", mask=None) -> Tensor:
    """Per-channel normalisation of ``x[batch, T, C]`` over valid frames."""
    x = ad.as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    m = _frame_mask(mask, x)
    if mode == "train":
        n = int(m.sum())
        if n == 0:
            raise ValueError("batch_norm: no valid frames")
        weight = m.astype(x.dtype)
        mu = ad.reduce_sum(x * weight, axis=(0, 1)) / n
        centered = x - mu
        var = ad.reduce_sum(centered * centered * weight, axis=(0, 1)) / n
        y = centered * ad.rsqrt(var + p.eps)
        unbiased = var.data * n / (n - 1) if n > 1 else var.data
        k = p.momentum
        p.running_mean.data[...] = (1 - k) * p.running_mean.data + k * mu.data
        p.running_var.data[...] = (1 - k) * p.running_var.data + k * unbiased
    elif mode == "eval":
        y = (x - p.running_mean) * (1.0 / np.sqrt(p.running_var.data + p.eps))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return y * p.gain + p.shift


def apply_mask(x, mask) -> Tensor:
    """Zero the padded frames of ``x[batch, T, C]``."""
    x = ad.as_tensor(x)
    if mask is None:
        return x
    m = _frame_mask(mask, x)
    if m.all():
        return x
    return x * m.astype(x.dtype)


def depthwise_conv1d(x, p: DepthwiseConvParams, mask=None) -> Tensor:
    return ad.depthwise_conv1d(apply_mask(x, mask), p.kernel, p.bias)


def dropout(x, rate: float, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = ad.as_tensor(x)
    if mode != "train" or rate == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def conv2d_subsample(feats, lengths, p: SubsamplingParams) -> tuple[Tensor, np.ndarray]:
    """Reduce ``feats[batch, T, F]`` about 4x in time and project to width d."""
    feats = ad.as_tensor(feats)
    B, T, F = feats.shape
    if subsampled_length(T) < 1 or subsampled_length(F) < 1:
        raise ShapeError(f"input of {T} frames x {F} bins is too short to subsample (need >= 7)")
    x = feats.reshape(B, 1, T, F)
    x = ad.relu(ad.conv2d(x, p.conv1_weight, p.conv1_bias, stride=2))
    x = ad.relu(ad.conv2d(x, p.conv2_weight, p.conv2_bias, stride=2))
    _, C, T2, F2 = x.shape
    x = ad.transpose(x, (0, 2, 1, 3)).reshape(B, T2, C * F2)
    out_lengths = subsampled_length(np.asarray(lengths))
    return linear(x, p.out), out_lengths


def lengths_to_mask(lengths, T: int | None = None) -> np.ndarray:
    lengths = np.asarray(lengths)
    T = int(lengths.max()) if T is None else T
    return np.arange(T)[None, :] < lengths[:, None]


# ---------------------------------------------------------------------------
# serialisation: JSON manifest + little-endian blob


def save_state(obj, directory, name: str = "params") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / f"{name}.bin", "wb") as fh:
        for key, t in named_tensors(obj):
            arr = np.ascontiguousarray(t.data)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            fh.write(raw)
            entries.append(
                {"name": key, "shape": list(arr.shape), "dtype": arr.dtype.name,
                 "offset": offset, "nbytes": len(raw)}
            )
            offset += len(raw)
    manifest = directory / f"{name}.json"
    manifest.write_text(json.dumps({"blob": f"{name}.bin", "tensors": entries}, indent=1))
    return manifest


def load_state(obj, directory, name: str = "params") -> None:
    """Fill the tensors of ``obj`` in place from a saved manifest."""
    directory = Path(directory)
    manifest = json.loads((directory / f"{name}.json").read_text())
    blob = (directory / manifest["blob"]).read_bytes()
    targets = dict(named_tensors(obj))
    missing = set(targets) - {entry["name"] for entry in manifest["tensors"]}
    if missing:
        raise KeyError(f"checkpoint lacks tensors {sorted(missing)}")
    for entry in manifest["tensors"]:
        if entry["name"] not in targets:
            raise KeyError(f"checkpoint tensor {entry['name']!r} has no destination")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=entry["offset"]).reshape(entry["shape"])
        dest = targets[entry["name"]]
        if dest.shape != arr.shape:
            raise ShapeError(f"{entry['name']}: checkpoint shape {arr.shape} vs model {dest.shape}")
        dest.data[...] = arr
