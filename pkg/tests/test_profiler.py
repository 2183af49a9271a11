import json

import numpy as np
import pytest

from branchkit import autodiff as ad
from branchkit.checks import TOY
from branchkit.encoders import PRESETS, preset
from branchkit.nn import depthwise_conv1d, init_depthwise, init_layer_norm, init_linear, linear, parameter_count
from branchkit.profiler import (
    count_macs,
    count_params,
    diff_reports,
    enumerate_params,
    mac_oracle,
    profile_report,
)


def test_small_parameter_counts(rng):
    assert parameter_count(init_linear(rng, 4, 8)) == 40
    assert parameter_count(init_layer_norm(256)) == 512


def test_linear_macs(rng):
    p = init_linear(rng, 256, 1024)
    with ad.no_grad(), ad.count_macs() as counter:
        linear(np.zeros((1, 250, 256)), p)
    assert counter[0] == 250 * 256 * 1024 == 65_536_000


def test_depthwise_macs(rng):
    p = init_depthwise(rng, 512, 31)
    with ad.no_grad(), ad.count_macs() as counter:
        depthwise_conv1d(np.zeros((1, 250, 512)), p)
    assert counter[0] == 250 * 512 * 31 == 3_968_000


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_count_params_matches_enumeration(name):
    cfg = PRESETS[name]
    assert count_params(cfg) == enumerate_params(cfg)
    assert count_params(cfg, None) == enumerate_params(cfg, None)


@pytest.mark.parametrize("kind", ["conformer", "e_branchformer"])
@pytest.mark.parametrize("layers,T", [(1, 10), (1, 37), (2, 64)])
def test_count_macs_matches_instrumented_forward(kind, layers, T):
    cfg = TOY.replace(kind=kind, num_layers=layers, d=8 * layers, feat_dim=16)
    assert count_macs(cfg, T) == mac_oracle(cfg, T)
    assert count_macs(cfg, T, vocab_size=5) == mac_oracle(cfg, T, vocab_size=5)


def test_linear_only_model_oracle():
    cfg = TOY.replace(num_layers=0, feat_dim=7)
    # with no layers, everything is frontend: check against a hand count
    t1, f1 = 3, 3
    expected = t1 * f1 * 8 * 9 + 1 * 1 * 8 * 8 * 9 + 1 * 8 * 8
    assert count_macs(cfg, 7) == mac_oracle(cfg, 7) == expected


@pytest.mark.parametrize("kind", ["conformer", "e_branchformer"])
def test_macs_monotone(kind):
    base = TOY.replace(kind=kind, num_layers=2, d=16, feat_dim=40)
    series = {
        "T": [count_macs(base, T) for T in (50, 100, 200, 400)],
        "d": [count_macs(base.replace(d=d), 200) for d in (8, 16, 32)],
        "d_ff": [count_macs(base.replace(ffn_expansion=e), 200) for e in (1.0, 2.0, 4.0)],
        "d_mlp": [count_macs(base.replace(mlp_expansion=e), 200) for e in (1.0, 2.0, 4.0)],
        "layers": [count_macs(base.replace(num_layers=n), 200) for n in (0, 1, 2, 5)],
    }
    for key, values in series.items():
        assert all(a <= b for a, b in zip(values, values[1:])), key
    assert series["T"][0] < series["T"][-1] and series["layers"][0] < series["layers"][-1]


def test_ffn_macs_linear_in_width():
    rows = []
    for expansion in (2.0, 4.0, 8.0):
        report = profile_report(preset("medium-conformer-deep", ffn_expansion=expansion))
        rows.append(next(m["macs"] for m in report.modules if m["name"] == "layers.ffn"))
    assert rows[1] == 2 * rows[0] and rows[2] == 2 * rows[1]


def test_too_short_input():
    with pytest.raises(ValueError):
        count_macs(TOY, 6)


def test_report_totals_and_assumptions():
    cfg = preset("medium-ebranchformer")
    report = profile_report(cfg, seconds=10)
    assert report.assumptions["input_frames"] == 1000
    assert report.assumptions["encoder_frames"] == 249
    assert report.totals["params"] == sum(m["params"] for m in report.modules) == count_params(cfg)
    assert report.totals["macs"] == sum(m["macs"] for m in report.modules) == count_macs(cfg, 1000, vocab_size=500)
    assert report.totals["encoder_macs"] == count_macs(cfg, 1000)
    text = report.to_text()
    assert "layers.cgmlp" in text and "assumptions:" in text


def test_report_json_schema():
    data = json.loads(profile_report(preset("toy-conformer"), seconds=2).to_json())
    assert set(data) == {"assumptions", "modules", "totals"}
    assert all(set(m) == {"name", "params", "macs"} for m in data["modules"])
    assert {"params", "macs"} <= set(data["totals"])
    assert all(isinstance(m["params"], int) and isinstance(m["macs"], int) for m in data["modules"])


def test_diff_lists_only_changed_modules():
    deep = profile_report(preset("medium-conformer-deep"))
    wide = profile_report(preset("medium-conformer-wide"))
    changed = {row["name"] for row in diff_reports(deep, wide)}
    # same d: the frontend and CTC head are shared, every per-layer row differs
    assert not any(name.startswith("frontend") for name in changed)
    assert "ctc_head" not in changed and "layers.ffn" in changed
    assert diff_reports(deep, deep) == []
    eb = profile_report(preset("medium-ebranchformer"))
    names = {row["name"] for row in diff_reports(deep, eb)}
    assert {"layers.conv_module", "layers.cgmlp", "layers.merge"} <= names


def test_medium_preset_accounting():
    for name, macs_g, params_m in (("medium-conformer-deep", 10.3, 25.8), ("medium-ebranchformer", 9.9, 25.3)):
        report = profile_report(preset(name), seconds=10)
        assert abs(report.totals["encoder_macs"] / 1e9 - macs_g) <= 0.10 * macs_g
        assert abs(report.totals["params"] / 1e6 - params_m) <= 0.03 * params_m
