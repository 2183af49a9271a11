"""Analytic parameter and multiply-accumulate accounting.

Conventions: only multiplies inside matmuls and convolutions are counted,
one MAC per multiply-accumulate; norms, activations, softmax and bias adds
are free. Relative-position attention projects all ``2T'-1`` offset
embeddings and scores each query against every offset before the shift,
which is how the forward pass actually computes it.

Two independent oracles back the closed forms: :func:`enumerate_params`
instantiates a model and sums tensor sizes, and :func:`mac_oracle` runs an
instrumented forward pass that counts multiplies as the kernels execute.
"""

from __future__ import annotations

import dataclasses
import json
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .ctc import ctc_log_probs, init_ctc_head
from .encoders import EncoderConfig, encoder_forward, init_encoder
from .nn import named_parameters, subsampled_length

DEFAULT_FRAME_RATE = 100.0
DEFAULT_FEAT_DIM = 80
DEFAULT_VOCAB = 500


def _linear(d_in, d_out, bias=True):
    return d_in * d_out + (d_out if bias else 0)


def _module_params(cfg: EncoderConfig, vocab_size: int | None) -> "OrderedDict[str, int]":
    d, f2 = cfg.d, int(subsampled_length(cfg.feat_dim))
    rows: OrderedDict[str, int] = OrderedDict()
    rows["frontend.conv1"] = d * 9 + d
    rows["frontend.conv2"] = d * d * 9 + d
    rows["frontend.out"] = _linear(d * f2, d)

    n = cfg.num_layers
    ffn = _linear(d, cfg.d_ff) + _linear(cfg.d_ff, d)
    mha = 4 * _linear(d, d) + d * d + 2 * d
    rows["layers.ffn"] = n * 2 * ffn
    rows["layers.mha"] = n * mha
    if cfg.kind == "conformer":
        k = cfg.conv_kernel
        rows["layers.conv_module"] = n * (_linear(d, 2 * d) + d * k + d + 2 * d + _linear(d, d))
        pre_norms = 4
    else:
        half, k = cfg.d_mlp // 2, cfg.cgmlp_kernel
        rows["layers.cgmlp"] = n * (2 * d + _linear(d, cfg.d_mlp) + 2 * half + half * k + half + _linear(half, d))
        rows["layers.merge"] = n * (2 * d * cfg.merge_kernel + 2 * d + _linear(2 * d, d))
        pre_norms = 3
    rows["layers.norms"] = n * 2 * d * ((pre_norms if cfg.prenorm else 0) + 1)
    if vocab_size is not None:
        rows["ctc_head"] = _linear(d, vocab_size + 1)
    return rows


def _module_macs(cfg: EncoderConfig, T: int, F: int, vocab_size: int | None) -> "OrderedDict[str, int]":
    if subsampled_length(T) < 1 or subsampled_length(F) < 1:
        raise ValueError(f"input of {T} frames x {F} bins is below the subsampling minimum of 7")
    d = cfg.d
    t1, f1 = (T - 3) // 2 + 1, (F - 3) // 2 + 1
    t, f2 = int(subsampled_length(T)), int(subsampled_length(F))
    rows: OrderedDict[str, int] = OrderedDict()
    rows["frontend.conv1"] = t1 * f1 * d * 9
    rows["frontend.conv2"] = t * f2 * d * d * 9
    rows["frontend.out"] = t * d * f2 * d

    n = cfg.num_layers
    offsets = 2 * t - 1
    rows["layers.ffn"] = n * 2 * (2 * t * d * cfg.d_ff)
    rows["layers.mha"] = n * (4 * t * d * d + offsets * d * d + 2 * t * t * d + t * offsets * d)
    if cfg.kind == "conformer":
        rows["layers.conv_module"] = n * (t * d * 2 * d + t * d * cfg.conv_kernel + t * d * d)
    else:
        half = cfg.d_mlp // 2
        rows["layers.cgmlp"] = n * (t * d * cfg.d_mlp + t * half * cfg.cgmlp_kernel + t * half * d)
        rows["layers.merge"] = n * (t * 2 * d * cfg.merge_kernel + t * 2 * d * d)
    rows["layers.norms"] = 0
    if vocab_size is not None:
        rows["ctc_head"] = t * d * (vocab_size + 1)
    return rows


def count_params(cfg: EncoderConfig, vocab_size: int | None = DEFAULT_VOCAB) -> int:
    """Trainable parameters of frontend + encoder (+ CTC head when ``vocab_size`` is set)."""
    return sum(_module_params(cfg, vocab_size).values())


def count_macs(cfg: EncoderConfig, T: int, F: int | None = None, vocab_size: int | None = None) -> int:
    """Encoder MACs for ``T`` input frames (CTC head included only if ``vocab_size`` is set)."""
    F = cfg.feat_dim if F is None else F
    return sum(_module_macs(cfg.replace(feat_dim=F), T, F, vocab_size).values())


def enumerate_params(cfg: EncoderConfig, vocab_size: int | None = DEFAULT_VOCAB, dtype=np.float32) -> int:
    """Instantiate the model and sum the sizes of its trainable tensors."""
    rng = np.random.default_rng(0)
    model = {"encoder": init_encoder(rng, cfg, dtype=dtype)}
    if vocab_size is not None:
        model["head"] = init_ctc_head(rng, cfg.d, vocab_size, dtype=dtype)
    return sum(t.size for _, t in named_parameters(model))


def mac_oracle(cfg: EncoderConfig, T: int, F: int | None = None, vocab_size: int | None = None, seed: int = 0) -> int:
    """Count MACs by running one eval-mode forward pass with instrumented kernels."""
    F = cfg.feat_dim if F is None else F
    cfg = cfg.replace(feat_dim=F)
    rng = np.random.default_rng(seed)
    params = init_encoder(rng, cfg)
    head = init_ctc_head(rng, cfg.d, vocab_size) if vocab_size is not None else None
    feats = rng.normal(size=(1, T, F))
    with ad.no_grad(), ad.count_macs() as counter:
        out, _ = encoder_forward(feats, [T], params, cfg, mode="eval")
        if head is not None:
            ctc_log_probs(out, head)
    return counter[0]


@dataclasses.dataclass
class ProfileReport:
    modules: list[dict]
    totals: dict
    assumptions: dict

    def to_dict(self) -> dict:
        return {"assumptions": self.assumptions, "modules": self.modules, "totals": self.totals}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        name_w = max([len("module")] + [len(m["name"]) for m in self.modules])
        lines = [f"{'module':<{name_w}}  {'params':>14}  {'MACs':>16}"]
        lines.append("-" * len(lines[0]))
        for m in self.modules:
            lines.append(f"{m['name']:<{name_w}}  {m['params']:>14,d}  {m['macs']:>16,d}")
        lines.append("-" * len(lines[0]))
        lines.append(f"{'total':<{name_w}}  {self.totals['params']:>14,d}  {self.totals['macs']:>16,d}")
        lines.append(f"{'encoder MACs':<{name_w}}  {'':>14}  {self.totals['encoder_macs']:>16,d}")
        lines.append(
            f"params {self.totals['params'] / 1e6:.2f}M   encoder MACs {self.totals['encoder_macs'] / 1e9:.2f}G"
        )
        lines.append("assumptions:")
        for key, value in self.assumptions.items():
            lines.append(f"  {key}: {value}")
        return "\n".join(lines)


def profile_report(
    cfg: EncoderConfig,
    seconds: float = 10.0,
    frame_rate: float = DEFAULT_FRAME_RATE,
    feat_dim: int | None = None,
    vocab_size: int | None = DEFAULT_VOCAB,
) -> ProfileReport:
    F = cfg.feat_dim if feat_dim is None else feat_dim
    cfg = cfg.replace(feat_dim=F)
    T = int(round(seconds * frame_rate))
    params = _module_params(cfg, vocab_size)
    macs = _module_macs(cfg, T, F, vocab_size)
    modules = [{"name": name, "params": int(params[name]), "macs": int(macs[name])} for name in params]
    encoder_macs = sum(m["macs"] for m in modules if m["name"] != "ctc_head")
    totals = {
        "params": sum(m["params"] for m in modules),
        "macs": sum(m["macs"] for m in modules),
        "encoder_macs": encoder_macs,
    }
    assumptions = {
        "seconds": seconds,
        "frame_rate": frame_rate,
        "input_frames": T,
        "encoder_frames": int(subsampled_length(T)),
        "feat_dim": F,
        "vocab_size": vocab_size,
        "layer_kind": cfg.kind,
        "num_layers": cfg.num_layers,
        "d": cfg.d,
        "d_ff": cfg.d_ff,
        "d_mlp": cfg.d_mlp if cfg.kind == "e_branchformer" else None,
        "subsampling": "two valid 3x3 stride-2 conv2d + ReLU, linear d*f2->d",
        "counting": "matmul/conv multiplies only; norms, activations, softmax, biases excluded",
        "rel_pos": "2T'-1 offset embeddings projected and scored before shift",
        "depthwise_bias": True,
    }
    return ProfileReport(modules=modules, totals=totals, assumptions=assumptions)


def diff_reports(a: ProfileReport, b: ProfileReport) -> list[dict]:
    """Rows whose params or MACs differ between two reports."""
    left = {m["name"]: m for m in a.modules}
    right = {m["name"]: m for m in b.modules}
    out = []
    for name in list(left) + [n for n in right if n not in left]:
        la, rb = left.get(name), right.get(name)
        if la is None or rb is None or la["params"] != rb["params"] or la["macs"] != rb["macs"]:
            out.append({"name": name, "a": la, "b": rb})
    return out
