"""Gradient-check cases and the invariant suite behind ``branchkit verify``."""

from __future__ import annotations

import dataclasses
import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import init_mha, mha_forward
from .ctc import ctc_brute_force, ctc_loss, min_frames
from .encoders import (
    EncoderConfig,
    cgmlp_forward,
    conformer_layer,
    conv_module_forward,
    ebranchformer_layer,
    encoder_forward,
    init_cgmlp,
    init_conv_module,
    init_encoder,
    init_layer,
    init_merge,
    merge_branches,
)
from .nn import (
    batch_norm,
    conv2d_subsample,
    depthwise_conv1d,
    gelu,
    glu,
    init_batch_norm,
    init_depthwise,
    init_layer_norm,
    init_linear,
    init_subsampling,
    layer_norm,
    linear,
    named_parameters,
    pointwise_conv,
    swish,
)

GRAD_TOL = 1e-4
GRAD_EPS = 1e-5

# toy layer geometry for gradient checks
TOY = EncoderConfig(
    kind="e_branchformer", num_layers=1, d=8, heads=2, ffn_expansion=2.0, mlp_expansion=2.0,
    conv_kernel=3, cgmlp_kernel=3, merge_kernel=3, dropout=0.0, attention_dropout=0.0, feat_dim=11,
)


def _randomize(params, rng, scale=0.5):
    """Move every parameter off its structured init (unit gains, zero shifts)."""
    for _, t in named_parameters(params):
        t.data[...] = t.data + rng.normal(scale=scale, size=t.shape)


def _scalarize(out, rng):
    weights = rng.normal(size=out.shape)
    return lambda y: ad.reduce_sum(y * weights)


def _case(forward: Callable, params, x: ad.Tensor, rng, extra=()):
    inputs = [x] + [t for _, t in named_parameters(params)] + list(extra)
    with ad.no_grad():
        probe = forward()
    reduce_fn = _scalarize(probe, rng)
    return (lambda: reduce_fn(forward())), inputs


def _case_linear(rng):
    p = init_linear(rng, 4, 3)
    x = ad.Tensor(rng.normal(size=(2, 3, 4)))
    return _case(lambda: linear(x, p), p, x, rng)


def _case_pointwise(rng):
    p = init_linear(rng, 5, 4)
    x = ad.Tensor(rng.normal(size=(2, 3, 5)))
    return _case(lambda: pointwise_conv(x, p), p, x, rng)


def _case_swish(rng):
    x = ad.Tensor(rng.normal(size=(3, 5)))
    return _case(lambda: swish(x), None, x, rng)


def _case_gelu(rng):
    x = ad.Tensor(rng.normal(size=(3, 5)))
    return _case(lambda: gelu(x), None, x, rng)


def _case_glu(rng):
    x = ad.Tensor(rng.normal(size=(3, 8)))
    return _case(lambda: glu(x), None, x, rng)


def _case_layer_norm(rng):
    p = init_layer_norm(6)
    _randomize(p, rng)
    x = ad.Tensor(rng.normal(size=(2, 3, 6)))
    return _case(lambda: layer_norm(x, p), p, x, rng)


def _case_batch_norm_train(rng):
    p = init_batch_norm(4)
    _randomize(p, rng)
    x = ad.Tensor(rng.normal(size=(2, 5, 4)))
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
    return _case(lambda: batch_norm(x, p, "train", mask), p, x, rng)


def _case_batch_norm_eval(rng):
    p = init_batch_norm(4)
    _randomize(p, rng)
    p.running_mean.data[...] = rng.normal(size=4)
    p.running_var.data[...] = rng.uniform(0.5, 2.0, size=4)
    x = ad.Tensor(rng.normal(size=(2, 5, 4)))
    return _case(lambda: batch_norm(x, p, "eval"), p, x, rng)


def _case_depthwise(rng):
    p = init_depthwise(rng, 3, 5)
    x = ad.Tensor(rng.normal(size=(2, 6, 3)))
    mask = np.array([[1] * 6, [1] * 4 + [0] * 2], dtype=bool)
    return _case(lambda: depthwise_conv1d(x, p, mask), p, x, rng)


def _case_subsampling(rng):
    p = init_subsampling(rng, 9, 3)
    x = ad.Tensor(rng.normal(size=(1, 11, 9)))
    return _case(lambda: conv2d_subsample(x, [11], p)[0], p, x, rng)


def _case_mha(rng):
    p = init_mha(rng, 8, 2)
    x = ad.Tensor(rng.normal(size=(2, 4, 8)))
    mask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=bool)
    return _case(lambda: mha_forward(x, p, mask), p, x, rng)


def _case_conv_module(rng):
    p = init_conv_module(rng, 6, 3)
    _randomize(p, rng, 0.2)
    p.bn.running_mean.data[...] = rng.normal(size=6)
    p.bn.running_var.data[...] = rng.uniform(0.5, 2.0, size=6)
    x = ad.Tensor(rng.normal(size=(1, 5, 6)))
    return _case(lambda: conv_module_forward(x, p, np.ones((1, 5), bool), "eval"), p, x, rng)


def _case_cgmlp(rng):
    p = init_cgmlp(rng, 6, 8, 3)
    _randomize(p, rng, 0.2)
    x = ad.Tensor(rng.normal(size=(1, 4, 6)))
    return _case(lambda: cgmlp_forward(x, p, np.ones((1, 4), bool)), p, x, rng)


def _case_merge(rng):
    p = init_merge(rng, 4, 3)
    x_att = ad.Tensor(rng.normal(size=(1, 3, 4)))
    x_mlp = ad.Tensor(rng.normal(size=(1, 3, 4)))
    return _case(lambda: merge_branches(x_att, x_mlp, p), p, x_att, rng, extra=[x_mlp])


def _layer_case(kind, rng):
    cfg = TOY.replace(kind=kind)
    p = init_layer(rng, cfg)
    _randomize(p, rng, 0.2)
    if kind == "conformer":
        p.conv.bn.running_var.data[...] = rng.uniform(0.5, 2.0, size=cfg.d)
    x = ad.Tensor(rng.normal(size=(1, 4, cfg.d)))
    mask = np.ones((1, 4), bool)
    fn = conformer_layer if kind == "conformer" else ebranchformer_layer
    return _case(lambda: fn(x, p, mask, "eval"), p, x, rng)


def _case_conformer_layer(rng):
    return _layer_case("conformer", rng)


def _case_ebranchformer_layer(rng):
    return _layer_case("e_branchformer", rng)


def _case_encoder_stack(rng):
    cfg = TOY.replace(num_layers=2, feat_dim=9)
    p = init_encoder(rng, cfg)
    x = ad.Tensor(rng.normal(size=(1, 27, 9)))
    return _case(lambda: encoder_forward(x, [27], p, cfg, "eval")[0], p, x, rng)


def _case_ctc(rng):
    B, T, V = 2, 6, 3
    x = ad.Tensor(rng.normal(size=(B, T, V + 1)))
    labels = [[1, 2, 2], [3]]
    f = lambda: ctc_loss(ad.log_softmax(x), labels, [6, 4])  # noqa: E731
    return f, [x]


GRADCHECK_CASES: dict[str, Callable] = {
    "linear": _case_linear,
    "pointwise_conv": _case_pointwise,
    "swish": _case_swish,
    "gelu": _case_gelu,
    "glu": _case_glu,
    "layer_norm": _case_layer_norm,
    "batch_norm_train": _case_batch_norm_train,
    "batch_norm_eval": _case_batch_norm_eval,
    "depthwise_conv1d": _case_depthwise,
    "conv2d_subsample": _case_subsampling,
    "mha": _case_mha,
    "conv_module": _case_conv_module,
    "cgmlp": _case_cgmlp,
    "merge": _case_merge,
    "conformer_layer": _case_conformer_layer,
    "ebranchformer_layer": _case_ebranchformer_layer,
    "encoder_stack": _case_encoder_stack,
    "ctc_loss": _case_ctc,
}


def run_gradcheck(name: str, seed: int, eps: float = GRAD_EPS) -> float:
    f, inputs = GRADCHECK_CASES[name](np.random.default_rng(seed))
    return ad.grad_check(f, inputs, eps)


# ---------------------------------------------------------------------------
# invariant suite


@dataclasses.dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


def random_ctc_instance(rng):
    T = int(rng.integers(1, 9))
    V = int(rng.integers(1, 5))
    log_probs = np.log(rng.dirichlet(np.ones(V + 1), size=T))
    while True:
        L = int(rng.integers(0, T + 1))
        labels = rng.integers(1, V + 1, size=L).tolist()
        if min_frames(labels) <= T:
            return log_probs, labels


def check_ctc_equivalence(n: int = 200, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        lp, labels = random_ctc_instance(rng)
        got = ctc_loss(lp[None], [labels]).item()
        worst = max(worst, abs(got - ctc_brute_force(lp, labels)))
    return worst < 1e-9, f"max |dp - enumeration| = {worst:.2e} over {n} instances"


def check_gradients(seeds: int = 1) -> tuple[bool, str]:
    worst = {name: max(run_gradcheck(name, s) for s in range(seeds)) for name in GRADCHECK_CASES}
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    top = max(worst.values())
    return not bad, f"worst rel. err {top:.2e}" + (f"; failing {sorted(bad)}" if bad else "")


def check_zero_reduction() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    worst = 0.0
    for kind in ("conformer", "e_branchformer"):
        p = init_layer(rng, TOY.replace(kind=kind))
        for name, t in named_parameters(p):
            if not (name.endswith("gain") and "norm_final" in name):
                t.data[...] = 0.0
        x = rng.normal(size=(1, 5, TOY.d))
        fn = conformer_layer if kind == "conformer" else ebranchformer_layer
        y = fn(x, p, np.ones((1, 5), bool), "eval").data
        mu = x.mean(-1, keepdims=True)
        ref = (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + 1e-12)
        worst = max(worst, float(np.abs(y - ref).max()))
    return worst <= 1e-10, f"max deviation from LayerNorm(x) {worst:.2e}"


def check_merge_reference() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    p = init_merge(rng, 6, 3)
    p.depthwise.kernel.data[...] = 0.0
    p.depthwise.bias.data[...] = 0.0
    a, b = rng.normal(size=(2, 7, 6)), rng.normal(size=(2, 7, 6))
    got = merge_branches(a, b, p).data
    ref = np.concatenate([a, b], axis=-1) @ p.proj.weight.data + p.proj.bias.data
    err = float(np.abs(got - ref).max())
    return err <= 1e-12, f"max |merge - concat+linear| = {err:.2e}"


def check_delta_kernel() -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    ok = True
    for k in (1, 3, 15, 31):
        p = init_depthwise(rng, 5, k)
        p.kernel.data[...] = 0.0
        p.kernel.data[:, k // 2] = 1.0
        p.bias.data[...] = 0.0
        x = rng.normal(size=(2, 40, 5))
        ok &= bool(np.array_equal(depthwise_conv1d(x, p).data, x))
    return ok, "delta kernels reproduce their input bit for bit" if ok else "delta kernel changed its input"


def check_padding_opacity() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    worst = 0.0
    for kind in ("conformer", "e_branchformer"):
        cfg = TOY.replace(kind=kind, num_layers=2, feat_dim=9)
        p = init_encoder(rng, cfg)
        lengths = np.array([40, 23])
        feats = rng.normal(size=(2, 40, 9))
        feats[1, 23:] = 0.0
        garbage = feats.copy()
        garbage[1, 23:] = rng.normal(scale=100.0, size=(17, 9))
        with ad.no_grad():
            a, out_len = encoder_forward(feats, lengths, p, cfg, "eval")
            b, _ = encoder_forward(garbage, lengths, p, cfg, "eval")
        n = int(out_len[1])
        worst = max(worst, float(np.abs(a.data[1, :n] - b.data[1, :n]).max()),
                    float(np.abs(a.data[0] - b.data[0]).max()))
    return worst <= 1e-8, f"max change at valid frames {worst:.2e}"


def check_profiler_oracles() -> tuple[bool, str]:
    from .profiler import count_macs, count_params, enumerate_params, mac_oracle

    bad = []
    for kind in ("conformer", "e_branchformer"):
        for layers in (1, 2):
            cfg = TOY.replace(kind=kind, num_layers=layers, d=8 * layers, feat_dim=20)
            if count_macs(cfg, 50) != mac_oracle(cfg, 50):
                bad.append(f"macs {kind}x{layers}")
            if count_params(cfg, 7) != enumerate_params(cfg, 7):
                bad.append(f"params {kind}x{layers}")
    return not bad, "closed forms equal instrumented counts" if not bad else f"mismatch: {bad}"


def check_medium_accounting() -> tuple[bool, str]:
    from .encoders import preset
    from .profiler import profile_report

    rows = []
    ok = True
    for name, macs_g, params_m in (("medium-conformer-deep", 10.3, 25.8), ("medium-ebranchformer", 9.9, 25.3)):
        r = profile_report(preset(name), seconds=10)
        m = r.totals["encoder_macs"] / 1e9
        p = r.totals["params"] / 1e6
        ok &= abs(m - macs_g) <= 0.10 * macs_g and abs(p - params_m) <= 0.03 * params_m
        rows.append(f"{name}: {m:.2f}G/{macs_g}G, {p:.2f}M/{params_m}M")
    return ok, "; ".join(rows)


VERIFY_CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "ctc_equivalence": lambda: check_ctc_equivalence(100),
    "gradients": check_gradients,
    "zero_parameter_reduction": check_zero_reduction,
    "merge_reference": check_merge_reference,
    "delta_kernel_identity": check_delta_kernel,
    "padding_opacity": check_padding_opacity,
    "profiler_oracles": check_profiler_oracles,
    "medium_accounting": check_medium_accounting,
}


def verify_suite(names=None) -> list[CheckResult]:
    names = list(VERIFY_CHECKS) if names is None else names
    return [_timed(name, VERIFY_CHECKS[name]) for name in names]
