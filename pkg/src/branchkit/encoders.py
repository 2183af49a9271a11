"""Conformer and E-Branchformer encoder layers and stacks.

Both layer types sandwich their context modules between two Macaron FFNs
that contribute with residual weight 1/2 and finish with a LayerNorm:

    Conformer        x1 = x  + 1/2 FFN1(x)
                     x2 = x1 + MHA(x1)
                     x3 = x2 + Conv(x2)
                     x4 = x3 + 1/2 FFN2(x3)
                     y  = LayerNorm(x4)

    E-Branchformer   x1 = x  + 1/2 FFN1(x)
                     x2 = x1 + Merge(MHA(x1), cgMLP(x1))
                     x3 = x2 + 1/2 FFN2(x2)
                     y  = LayerNorm(x3)

With ``prenorm`` on (the default) every residual branch other than cgMLP
first applies its own LayerNorm; cgMLP already starts with one.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import RelPosMHAParams, init_mha, mha_forward
from .autodiff import ShapeError, Tensor
from .nn import (
    BatchNormParams,
    DepthwiseConvParams,
    LayerNormParams,
    LinearParams,
    SubsamplingParams,
    apply_mask,
    batch_norm,
    conv2d_subsample,
    depthwise_conv1d,
    dropout,
    gelu,
    glu,
    init_batch_norm,
    init_depthwise,
    init_layer_norm,
    init_linear,
    init_subsampling,
    layer_norm,
    lengths_to_mask,
    linear,
    subsampled_length,
    swish,
)

LAYER_KINDS = ("conformer", "e_branchformer")
MERGE_MODES = ("additive", "replace")


# ---------------------------------------------------------------------------
# parameter bundles


@dataclasses.dataclass
class FFNParams:
    w_in: LinearParams
    w_out: LinearParams
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.w_in.d_out != self.w_out.d_in:
            raise ShapeError("FFN inner widths disagree")


@dataclasses.dataclass
class ConvModuleParams:
    pw1: LinearParams  # d -> 2d
    depthwise: DepthwiseConvParams
    bn: BatchNormParams
    pw2: LinearParams  # d -> d
    dropout_rate: float = 0.0


@dataclasses.dataclass
class CgMLPParams:
    norm: LayerNormParams
    w_u: LinearParams  # d -> d_mlp
    gate_norm: LayerNormParams
    depthwise: DepthwiseConvParams
    w_v: LinearParams  # d_mlp/2 -> d
    gate_bias: Tensor | None = None
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.w_u.d_out % 2:
            raise ShapeError(f"d_mlp must be even, got {self.w_u.d_out}")


@dataclasses.dataclass
class MergeParams:
    depthwise: DepthwiseConvParams  # over 2d channels
    proj: LinearParams  # 2d -> d
    mode: str = "additive"

    def __post_init__(self):
        if self.mode not in MERGE_MODES:
            raise ValueError(f"merge mode must be one of {MERGE_MODES}")


@dataclasses.dataclass
class ConformerLayerParams:
    ffn1: FFNParams
    mha: RelPosMHAParams
    conv: ConvModuleParams
    ffn2: FFNParams
    norm_final: LayerNormParams
    norm_ffn1: LayerNormParams | None = None
    norm_mha: LayerNormParams | None = None
    norm_conv: LayerNormParams | None = None
    norm_ffn2: LayerNormParams | None = None
    dropout_rate: float = 0.0


@dataclasses.dataclass
class EBranchformerLayerParams:
    ffn1: FFNParams
    mha: RelPosMHAParams
    cgmlp: CgMLPParams
    merge: MergeParams
    ffn2: FFNParams
    norm_final: LayerNormParams
    norm_ffn1: LayerNormParams | None = None
    norm_mha: LayerNormParams | None = None
    norm_ffn2: LayerNormParams | None = None
    dropout_rate: float = 0.0


@dataclasses.dataclass
class EncoderParams:
    frontend: SubsamplingParams
    layers: list


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    kind: str = "e_branchformer"
    num_layers: int = 12
    d: int = 256
    heads: int = 4
    ffn_expansion: float = 4.0
    mlp_expansion: float = 4.0
    conv_kernel: int = 31
    cgmlp_kernel: int = 31
    merge_kernel: int = 3
    dropout: float = 0.1
    attention_dropout: float = 0.1
    stochastic_depth: float = 0.0
    stochastic_depth_schedule: str = "constant"
    feat_dim: int = 80
    prenorm: bool = True
    merge_mode: str = "additive"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer kind must be one of {LAYER_KINDS}, got {self.kind!r}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        for name in ("conv_kernel", "cgmlp_kernel", "merge_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ValueError(f"{name} must be odd")
        if self.d_mlp % 2:
            raise ValueError("d_mlp must be even")
        if not 0 <= self.stochastic_depth < 1:
            raise ValueError("stochastic depth rate must lie in [0, 1)")
        if self.stochastic_depth_schedule not in ("constant", "linear"):
            raise ValueError("stochastic_depth_schedule must be 'constant' or 'linear'")
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}")
        if self.num_layers < 0:
            raise ValueError("num_layers must be non-negative")

    @property
    def d_ff(self) -> int:
        return int(round(self.ffn_expansion * self.d))

    @property
    def d_mlp(self) -> int:
        return int(round(self.mlp_expansion * self.d))

    def layer_drop_rates(self) -> list[float]:
        n = self.num_layers
        if self.stochastic_depth_schedule == "linear":
            return [self.stochastic_depth * (i + 1) / n for i in range(n)]
        return [self.stochastic_depth] * n

    def replace(self, **changes) -> "EncoderConfig":
        return dataclasses.replace(self, **changes)


PRESETS: dict[str, EncoderConfig] = {
    "medium-conformer-deep": EncoderConfig(kind="conformer", num_layers=15, d=256, heads=4, ffn_expansion=4.0),
    "medium-conformer-wide": EncoderConfig(kind="conformer", num_layers=12, d=256, heads=4, ffn_expansion=8.0),
    "medium-ebranchformer": EncoderConfig(
        kind="e_branchformer", num_layers=12, d=256, heads=4, ffn_expansion=4.0, mlp_expansion=4.0
    ),
    "large-ebranchformer": EncoderConfig(
        kind="e_branchformer", num_layers=17, d=512, heads=8, ffn_expansion=2.0, mlp_expansion=6.0
    ),
    "toy-ebranchformer": EncoderConfig(
        kind="e_branchformer", num_layers=2, d=64, heads=4, ffn_expansion=4.0, mlp_expansion=4.0,
        conv_kernel=15, cgmlp_kernel=15, merge_kernel=3, feat_dim=20,
    ),
    "toy-conformer": EncoderConfig(
        kind="conformer", num_layers=2, d=64, heads=4, ffn_expansion=4.0,
        conv_kernel=15, feat_dim=20,
    ),
}


def preset(name: str, **overrides) -> EncoderConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# initialisation


def init_ffn(rng, d, d_ff, dropout_rate=0.0, dtype=np.float64) -> FFNParams:
    return FFNParams(init_linear(rng, d, d_ff, dtype=dtype), init_linear(rng, d_ff, d, dtype=dtype), dropout_rate)


def init_conv_module(rng, d, kernel, dropout_rate=0.0, dtype=np.float64) -> ConvModuleParams:
    return ConvModuleParams(
        pw1=init_linear(rng, d, 2 * d, dtype=dtype),
        depthwise=init_depthwise(rng, d, kernel, dtype=dtype),
        bn=init_batch_norm(d, dtype=dtype),
        pw2=init_linear(rng, d, d, dtype=dtype),
        dropout_rate=dropout_rate,
    )


def init_cgmlp(rng, d, d_mlp, kernel, dropout_rate=0.0, dtype=np.float64) -> CgMLPParams:
    half = d_mlp // 2
    return CgMLPParams(
        norm=init_layer_norm(d, dtype=dtype),
        w_u=init_linear(rng, d, d_mlp, dtype=dtype),
        gate_norm=init_layer_norm(half, dtype=dtype),
        depthwise=init_depthwise(rng, half, kernel, dtype=dtype),
        w_v=init_linear(rng, half, d, dtype=dtype),
        dropout_rate=dropout_rate,
    )


def init_merge(rng, d, kernel, mode="additive", dtype=np.float64) -> MergeParams:
    return MergeParams(
        depthwise=init_depthwise(rng, 2 * d, kernel, dtype=dtype),
        proj=init_linear(rng, 2 * d, d, dtype=dtype),
        mode=mode,
    )


def init_layer(rng, cfg: EncoderConfig, dtype=np.float64):
    d = cfg.d

    def ln():
        return init_layer_norm(d, dtype=dtype) if cfg.prenorm else None

    common = dict(
        ffn1=init_ffn(rng, d, cfg.d_ff, cfg.dropout, dtype),
        mha=init_mha(rng, d, cfg.heads, cfg.attention_dropout, dtype),
    )
    if cfg.kind == "conformer":
        return ConformerLayerParams(
            **common,
            conv=init_conv_module(rng, d, cfg.conv_kernel, cfg.dropout, dtype),
            ffn2=init_ffn(rng, d, cfg.d_ff, cfg.dropout, dtype),
            norm_final=init_layer_norm(d, dtype=dtype),
            norm_ffn1=ln(), norm_mha=ln(), norm_conv=ln(), norm_ffn2=ln(),
            dropout_rate=cfg.dropout,
        )
    return EBranchformerLayerParams(
        **common,
        cgmlp=init_cgmlp(rng, d, cfg.d_mlp, cfg.cgmlp_kernel, cfg.dropout, dtype),
        merge=init_merge(rng, d, cfg.merge_kernel, cfg.merge_mode, dtype),
        ffn2=init_ffn(rng, d, cfg.d_ff, cfg.dropout, dtype),
        norm_final=init_layer_norm(d, dtype=dtype),
        norm_ffn1=ln(), norm_mha=ln(), norm_ffn2=ln(),
        dropout_rate=cfg.dropout,
    )


def init_encoder(rng, cfg: EncoderConfig, dtype=np.float64) -> EncoderParams:
    return EncoderParams(
        frontend=init_subsampling(rng, cfg.feat_dim, cfg.d, dtype=dtype),
        layers=[init_layer(rng, cfg, dtype) for _ in range(cfg.num_layers)],
    )


# ---------------------------------------------------------------------------
# sub-block forwards


def _check_width(x: Tensor, d: int, what: str) -> None:
    if x.shape[-1] != d:
        raise ShapeError(f"{what}: input width {x.shape[-1]} but parameters expect {d}")


def ffn_forward(x, p: FFNParams, mode: str = "eval", rng=None) -> Tensor:
    x = ad.as_tensor(x)
    _check_width(x, p.w_in.d_in, "ffn")
    hidden = dropout(swish(linear(x, p.w_in)), p.dropout_rate, mode, rng)
    return linear(hidden, p.w_out)


def conv_module_forward(x, p: ConvModuleParams, mask=None, mode: str = "eval", rng=None) -> Tensor:
    x = ad.as_tensor(x)
    _check_width(x, p.pw1.d_in, "conv module")
    y = glu(linear(apply_mask(x, mask), p.pw1))
    y = depthwise_conv1d(y, p.depthwise, mask)
    y = swish(batch_norm(y, p.bn, mode, mask))
    return linear(apply_mask(y, mask), p.pw2)


def cgmlp_forward(x, p: CgMLPParams, mask=None, mode: str = "eval", rng=None) -> Tensor:
    x = ad.as_tensor(x)
    _check_width(x, p.w_u.d_in, "cgMLP")
    z = gelu(linear(layer_norm(x, p.norm), p.w_u))
    a, b = ad.split(z, 2, axis=-1)
    gate = depthwise_conv1d(layer_norm(b, p.gate_norm), p.depthwise, mask)
    if p.gate_bias is not None:
        gate = gate + p.gate_bias
    return dropout(linear(a * gate, p.w_v), p.dropout_rate, mode, rng)


def merge_branches(x_att, x_mlp, p: MergeParams, mask=None) -> Tensor:
    x_att, x_mlp = ad.as_tensor(x_att), ad.as_tensor(x_mlp)
    if x_att.shape != x_mlp.shape:
        raise ShapeError(f"merge: branch shapes {x_att.shape} and {x_mlp.shape} differ")
    _check_width(x_att, p.proj.d_in // 2, "merge")
    c = ad.concat([x_att, x_mlp], axis=-1)
    refined = depthwise_conv1d(c, p.depthwise, mask)
    if p.mode == "additive":
        refined = c + refined
    return linear(refined, p.proj)


def _pre(x, norm):
    return x if norm is None else layer_norm(x, norm)


def conformer_layer(x, p: ConformerLayerParams, mask=None, mode: str = "eval", rng=None) -> Tensor:
    x = ad.as_tensor(x)
    _check_width(x, p.norm_final.gain.shape[0], "conformer layer")
    rate = p.dropout_rate

    def drop(t):
        return dropout(t, rate, mode, rng)

    x1 = x + ad.scale(drop(ffn_forward(_pre(x, p.norm_ffn1), p.ffn1, mode, rng)), 0.5)
    x2 = x1 + drop(mha_forward(_pre(x1, p.norm_mha), p.mha, mask, mode, rng))
    x3 = x2 + drop(conv_module_forward(_pre(x2, p.norm_conv), p.conv, mask, mode, rng))
    x4 = x3 + ad.scale(drop(ffn_forward(_pre(x3, p.norm_ffn2), p.ffn2, mode, rng)), 0.5)
    return layer_norm(x4, p.norm_final)


def ebranchformer_layer(x, p: EBranchformerLayerParams, mask=None, mode: str = "eval", rng=None) -> Tensor:
    x = ad.as_tensor(x)
    _check_width(x, p.norm_final.gain.shape[0], "e-branchformer layer")
    rate = p.dropout_rate

    def drop(t):
        return dropout(t, rate, mode, rng)

    x1 = x + ad.scale(drop(ffn_forward(_pre(x, p.norm_ffn1), p.ffn1, mode, rng)), 0.5)
    x_att = drop(mha_forward(_pre(x1, p.norm_mha), p.mha, mask, mode, rng))
    x_mlp = drop(cgmlp_forward(x1, p.cgmlp, mask, mode, rng))
    x2 = x1 + drop(merge_branches(x_att, x_mlp, p.merge, mask))
    x3 = x2 + ad.scale(drop(ffn_forward(_pre(x2, p.norm_ffn2), p.ffn2, mode, rng)), 0.5)
    return layer_norm(x3, p.norm_final)


def layer_forward(x, p, mask=None, mode: str = "eval", rng=None) -> Tensor:
    if isinstance(p, ConformerLayerParams):
        return conformer_layer(x, p, mask, mode, rng)
    if isinstance(p, EBranchformerLayerParams):
        return ebranchformer_layer(x, p, mask, mode, rng)
    raise TypeError(f"not a layer parameter bundle: {type(p).__name__}")


def stochastic_depth(layer_fn: Callable[[Tensor], Tensor], x, p_drop: float, mode: str = "eval", rng=None) -> Tensor:
    """Skip the whole layer with probability ``p_drop`` during training."""
    if not 0 <= p_drop < 1:
        raise ValueError(f"drop probability must lie in [0, 1), got {p_drop}")
    if mode == "train" and p_drop > 0:
        if rng is None:
            raise ValueError("train-mode stochastic depth needs an rng")
        if rng.random() < p_drop:
            return ad.as_tensor(x)
    return layer_fn(x)


# ---------------------------------------------------------------------------
# SpecAugment feature masking


@dataclasses.dataclass(frozen=True)
class SpecAugmentConfig:
    n_time_masks: int = 0
    max_time_width: int = 0
    n_freq_masks: int = 0
    max_freq_width: int = 0


def spec_augment(feats, cfg: SpecAugmentConfig, rng: np.random.Generator, lengths=None) -> Tensor:
    """Zero random time spans and frequency bands, independently per sequence.

    Mask widths are drawn uniformly from ``0..max_width`` and clipped to the
    axis extent; the start is uniform over positions where the mask fits.
    Time masks are confined to each sequence's valid length when given.
    """
    arr = np.array(ad.as_tensor(feats).data, copy=True)
    B, T, F = arr.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    for b in range(B):
        n = int(lengths[b])
        for _ in range(cfg.n_time_masks):
            w = min(int(rng.integers(0, cfg.max_time_width + 1)), n)
            t0 = int(rng.integers(0, n - w + 1))
            arr[b, t0 : t0 + w, :] = 0.0
        for _ in range(cfg.n_freq_masks):
            w = min(int(rng.integers(0, cfg.max_freq_width + 1)), F)
            f0 = int(rng.integers(0, F - w + 1))
            arr[b, :, f0 : f0 + w] = 0.0
    return Tensor(arr)


# ---------------------------------------------------------------------------
# full stack


def encoder_forward(
    feats,
    lengths,
    params: EncoderParams,
    cfg: EncoderConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray]:
    feats = ad.as_tensor(feats)
    if feats.shape[-1] != cfg.feat_dim:
        raise ShapeError(f"features have {feats.shape[-1]} bins, config expects {cfg.feat_dim}")
    lengths = np.asarray(lengths)
    if np.any(subsampled_length(lengths) < 1):
        raise ShapeError("sequence shorter than the subsampling minimum of 7 frames")
    x, out_lengths = conv2d_subsample(feats, lengths, params.frontend)
    mask = lengths_to_mask(out_lengths, x.shape[1])
    for layer, p_drop in zip(params.layers, cfg.layer_drop_rates()):
        x = stochastic_depth(lambda h, layer=layer: layer_forward(h, layer, mask, mode, rng), x, p_drop, mode, rng)
    return x, out_lengths
