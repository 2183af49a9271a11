"""Multi-head self-attention with Transformer-XL relative positions.

For query ``i`` and key ``j`` each head scores

    ((q_i + u) . k_j + (q_i + v) . r_{i-j}) / sqrt(d_head)

where ``r`` are sinusoidal relative embeddings projected by ``W_pos`` and
``u``, ``v`` are learned global biases.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import LinearParams, dropout, init_linear, linear


@dataclasses.dataclass
class RelPosMHAParams:
    heads: int
    w_q: LinearParams
    w_k: LinearParams
    w_v: LinearParams
    w_out: LinearParams
    w_pos: LinearParams
    pos_bias_u: Tensor  # d
    pos_bias_v: Tensor  # d
    dropout_rate: float = 0.0

    def __post_init__(self):
        d = self.w_q.d_in
        if d % self.heads:
            raise ShapeError(f"model width {d} not divisible by {self.heads} heads")
        for lin in (self.w_q, self.w_k, self.w_v, self.w_out, self.w_pos):
            if lin.weight.shape != (d, d):
                raise ShapeError(f"attention projections must be {d}x{d}, got {lin.weight.shape}")

    @property
    def d(self) -> int:
        return self.w_q.d_in

    @property
    def d_head(self) -> int:
        return self.d // self.heads


def init_mha(rng, d: int, heads: int, dropout_rate: float = 0.0, dtype=np.float64) -> RelPosMHAParams:
    if d % heads:
        raise ShapeError(f"model width {d} not divisible by {heads} heads")
    bound = 1.0 / math.sqrt(d)
    return RelPosMHAParams(
        heads=heads,
        w_q=init_linear(rng, d, d, dtype=dtype),
        w_k=init_linear(rng, d, d, dtype=dtype),
        w_v=init_linear(rng, d, d, dtype=dtype),
        w_out=init_linear(rng, d, d, dtype=dtype),
        w_pos=init_linear(rng, d, d, bias=False, dtype=dtype),
        pos_bias_u=ad.parameter(rng.uniform(-bound, bound, d), dtype=dtype),
        pos_bias_v=ad.parameter(rng.uniform(-bound, bound, d), dtype=dtype),
        dropout_rate=dropout_rate,
    )


def sinusoidal_rel_embeddings(T: int, d: int, dtype=np.float64) -> np.ndarray:
    """Rows for relative offsets ``T-1, T-2, ..., -(T-1)``; sin on even, cos on odd columns."""
    if T < 1:
        raise ValueError("sequence length must be positive")
    if d % 2:
        raise ShapeError(f"embedding width must be even, got {d}")
    offsets = np.arange(T - 1, -T, -1, dtype=np.float64)[:, None]
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d))
    angles = offsets * inv_freq[None, :]
    pe = np.empty((2 * T - 1, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe.astype(dtype)


def rel_shift(scores) -> Tensor:
    """Map offset-indexed scores ``[..., T, 2T-1]`` to key-indexed ``[..., T, T]``.

    ``out[..., i, j] = in[..., i, (T-1) + (j-i)]``
    """
    scores = ad.as_tensor(scores)
    T = scores.shape[-2]
    if scores.shape[-1] != 2 * T - 1:
        raise ShapeError(f"rel_shift expects last extent {2 * T - 1}, got {scores.shape[-1]}")
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    index = np.broadcast_to(T - 1 + j - i, scores.shape[:-1] + (T,))
    return ad.take_along_axis(scores, index, axis=-1)


def _heads(x: Tensor, heads: int) -> Tensor:
    """[B, T, d] -> [B, h, T, d_h]"""
    B, T, d = x.shape
    return ad.transpose(x.reshape(B, T, heads, d // heads), (0, 2, 1, 3))


def mha_forward(
    x,
    p: RelPosMHAParams,
    mask=None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    x = ad.as_tensor(x)
    B, T, d = x.shape
    if d != p.d:
        raise ShapeError(f"attention input width {d} vs parameters {p.d}")
    h, dh = p.heads, p.d_head

    q = _heads(linear(x, p.w_q), h)
    k = _heads(linear(x, p.w_k), h)
    v = _heads(linear(x, p.w_v), h)

    pos = ad.Tensor(sinusoidal_rel_embeddings(T, d, dtype=x.dtype))
    r = linear(pos, p.w_pos).reshape(2 * T - 1, h, dh)
    r = ad.transpose(r, (1, 2, 0))  # h, d_h, 2T-1

    qu = q + p.pos_bias_u.reshape(h, 1, dh)
    qv = q + p.pos_bias_v.reshape(h, 1, dh)
    content = ad.matmul(qu, ad.swapaxes(k, -1, -2))
    position = rel_shift(ad.matmul(qv, r))
    scores = ad.scale(content + position, 1.0 / math.sqrt(dh))

    key_mask = None
    if mask is not None:
        key_mask = ~np.asarray(mask, dtype=bool)[:, None, None, :]
    weights = ad.softmax(scores, axis=-1, mask=key_mask)
    attn = dropout(weights, p.dropout_rate, mode, rng)
    context = ad.matmul(attn, v)  # B h T d_h
    context = ad.transpose(context, (0, 2, 1, 3)).reshape(B, T, d)
    out = linear(context, p.w_out)
    if return_weights:
        return out, weights
    return out
