import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from embedcnn import socsim
from embedcnn.engine import forward, run
from embedcnn.graph import GraphBuilder, Task
from embedcnn.quantizer import (
    CalibStats,
    EmptyCalibSet,
    QAssignment,
    QSpec,
    QuantTargets,
    TargetUnreachable,
    assign,
    calibrate,
    dequantize,
    fold_batchnorm,
    frac_bits_for,
    graph_sqnr,
    quantize_value,
    quantized_forward,
    quantized_run,
    select_mixed_precision,
    shift_round,
    sqnr_db,
    with_bits,
)


def tiny_graph(seed=0, size=16):
    rng = np.random.default_rng(seed)
    b = GraphBuilder(seed)
    x = b.input("x", (2, size, size))
    a = b.conv_bn_relu("c1", x, 8, 3)
    s = b.conv_bn_relu("c2", a, 8, 5, stride=2)
    u = b.tconv("up", s, 4)
    cat = b.concat("cat", [u, b.conv("skip", x, 4, 1)])
    r = b.relu("r", b.add("sum", [b.conv("c3", cat, 4, 3), u]))
    b.head("out", b.conv("o", r, 3, 1), Task.SEGMENTATION)
    g = b.build()
    new = {}
    for nid in ("c1_bn", "c2_bn"):
        n = g[nid]
        c = len(n.gamma)
        new[nid] = dataclasses.replace(
            n, gamma=rng.uniform(0.5, 1.5, c), beta=rng.normal(0, 0.3, c), running_mean=rng.normal(0, 0.5, c), running_var=rng.uniform(0.5, 2, c)
        )
    return g.with_nodes(new)


def samples(n, seed=0, size=16):
    rng = np.random.default_rng(seed)
    return [{"x": rng.normal(size=(2, size, size))} for _ in range(n)]


# ---------------------------------------------------------------- formats


@pytest.mark.parametrize(
    "max_abs,bits,expected",
    [(3.7, 16, 13), (1.0, 16, 14), (0.0, 16, 15), (0.0, 8, 7), (1e6, 16, 0), (1e-9, 16, 15), (127.0, 8, 0), (0.9, 8, 7)],
)
def test_frac_bits(max_abs, bits, expected):
    assert frac_bits_for(max_abs, bits) == expected


def test_quantize_examples():
    assert quantize_value(1.0, QSpec(16, 8)) == 256
    assert all(quantize_value(0.0, QSpec(b, f)) == 0 for b in (8, 16) for f in (0, 3, 7))
    q = quantize_value(5.3, QSpec(8, 5))
    assert q == 127 and dequantize(q, QSpec(8, 5)) == 3.96875
    assert quantize_value(-100.0, QSpec(8, 5)) == -128


def test_round_half_even_and_half_up():
    np.testing.assert_array_equal(quantize_value([0.5, 1.5, 2.5, -0.5], QSpec(16, 0)), [0, 2, 2, 0])
    np.testing.assert_array_equal(shift_round(np.array([2, 6, -2, -6, 5]), 2), [1, 2, 0, -1, 1])
    np.testing.assert_array_equal(shift_round(np.array([3]), -2), [12])


def test_qspec_validation():
    with pytest.raises(ValueError):
        QSpec(12, 3)
    with pytest.raises(ValueError):
        QSpec(8, 8)


@given(st.sampled_from([8, 16]), st.data())
def test_round_trip_error_bound(bits, data):
    f = data.draw(st.integers(0, bits - 1))
    spec = QSpec(bits, f)
    x = np.array(data.draw(st.lists(st.floats(spec.qmin * spec.scale, spec.qmax * spec.scale), min_size=1, max_size=20)))
    err = np.abs(dequantize(quantize_value(x, spec), spec) - x)
    assert np.all(err <= 2.0 ** (-f - 1))


@given(st.sampled_from([8, 16]), st.data())
def test_more_frac_bits_never_worse(bits, data):
    f = data.draw(st.integers(0, bits - 2))
    lim = ((1 << (bits - 1)) - 1) * 2.0 ** -(f + 1)
    x = np.array(data.draw(st.lists(st.floats(-lim, lim), min_size=1, max_size=20)))
    mse = lambda s: float(np.mean((dequantize(quantize_value(x, s), s) - x) ** 2))
    assert mse(QSpec(bits, f + 1)) <= mse(QSpec(bits, f))


# ---------------------------------------------------------------- assignment


def test_assignment_json_round_trip(tmp_path):
    g = fold_batchnorm(tiny_graph())
    qa = assign(calibrate(g, samples(4)), eight_bit=["c1"])
    assert qa.eight_bit() == ["c1"]
    assert all(s.bits == 16 for s in qa.weights.values())
    qa.save(tmp_path / "q.json")
    assert QAssignment.load(tmp_path / "q.json") == qa
    calib = calibrate(g, samples(4))
    assert CalibStats.from_dict(calib.to_dict()) == calib


def test_empty_calibration_set():
    with pytest.raises(EmptyCalibSet):
        calibrate(tiny_graph(), [])


def test_fold_preserves_outputs():
    g = tiny_graph()
    f = fold_batchnorm(g)
    assert not any(n.kind == "batchnorm" for n in f.nodes.values())
    for s in samples(5):
        a = forward(g, s, dtype=np.float64)["out"]
        b = forward(f, s, dtype=np.float64)["out"]
        assert np.max(np.abs(a - b)) <= 1e-5 * np.max(np.abs(a))


# ---------------------------------------------------------------- integer execution


def test_exactly_representable_graph_is_bitwise():
    rng = np.random.default_rng(3)
    b = GraphBuilder(0)
    x = b.input("x", (2, 6, 6))
    w1 = rng.integers(-4, 5, (4, 2, 3, 3)) / 4
    w2 = rng.integers(-4, 5, (3, 4, 3, 3)) / 8
    c = b.relu("r", b.conv("c1", x, 4, 3, weight=w1, bias=rng.integers(-4, 4, 4) / 2))
    b.head("out", b.conv("c2", c, 3, 3, weight=w2, bias=np.zeros(3)), Task.SEGMENTATION)
    g = b.build()
    data = [{"x": rng.integers(-8, 9, (2, 6, 6)) / 8} for _ in range(5)]
    qa = assign(calibrate(g, data))
    for s in data:
        ref = forward(g, s, dtype=np.float64)["out"]
        assert np.array_equal(quantized_forward(g, qa, s)["out"], ref)


def test_sqnr_16_bit_and_8_bit():
    g = fold_batchnorm(tiny_graph(1))
    data = samples(100, seed=1)
    calib = calibrate(g, data)
    q16 = assign(calib)
    q8 = assign(calib, fm_bits=8)
    s16 = graph_sqnr(g, q16, data)
    s8 = graph_sqnr(g, q8, data)
    assert s16 > 40
    assert s8 < s16


def test_sqnr_improves_with_bits_on_every_seed():
    for seed in range(3):
        g = fold_batchnorm(tiny_graph(seed))
        data = samples(8, seed=seed)
        calib = calibrate(g, data)
        assert graph_sqnr(g, assign(calib), data) > graph_sqnr(g, assign(calib, fm_bits=8), data)


def test_sqnr_helper():
    assert sqnr_db([np.ones(4)], [np.ones(4)]) == math.inf
    assert sqnr_db([np.full(4, 10.0)], [np.full(4, 11.0)]) == pytest.approx(20.0)


def test_saturation_counted():
    g = fold_batchnorm(tiny_graph())
    calib = calibrate(g, samples(2))
    qa = assign(calib)
    loud = [{"x": s["x"] * 50} for s in samples(2)]
    _, stats = quantized_run(g, qa, {"x": np.stack([s["x"] for s in loud])})
    assert stats.total > 0
    _, quiet = quantized_run(g, qa, {"x": np.stack([s["x"] for s in samples(2)])})
    assert quiet.total == 0


# ---------------------------------------------------------------- mixed precision


@pytest.fixture(scope="module")
def mixed_setup():
    g = fold_batchnorm(tiny_graph(size=32))
    data = samples(4, size=32)
    calib = calibrate(g, data)
    hw = socsim.HardwareConfig(memory=socsim.MemoryConfig(ddr_bandwidth=1e8))
    return g, assign(calib), calib, hw


def test_targets_met_means_no_flips(mixed_setup):
    g, qa, calib, hw = mixed_setup
    res = select_mixed_precision(g, qa, calib, QuantTargets(1e9, 1e9), hw)
    assert res.met and res.flipped == [] and res.assignment == qa


def test_dominant_edge_flipped_first(mixed_setup):
    g, qa, calib, hw = mixed_setup
    base = socsim.run_sim(g, hw, qa)
    traffic = {"c2": 60, "c1": 30, "up": 10}
    tight = QuantTargets(base.bandwidth_gbps * 1.5, base.footprint_mb * 0.999)
    res = select_mixed_precision(g, qa, calib, tight, hw, traffic=traffic)
    assert res.flipped[0] == "c2"


def test_flips_never_increase_bytes(mixed_setup):
    g, qa, calib, hw = mixed_setup
    with pytest.raises(TargetUnreachable) as exc:
        select_mixed_precision(g, qa, calib, QuantTargets(1e-9, 1e-9), hw)
    best = exc.value.best
    assert not best.met and len(best.flipped) > 1
    assert all(a >= b for a, b in zip(best.ddr_trace, best.ddr_trace[1:]))
    assert best.ddr_trace[-1] < best.ddr_trace[0]
    assert set(best.flipped) <= set(best.assignment.eight_bit())


def test_with_bits_only_touches_named(mixed_setup):
    _, qa, calib, _ = mixed_setup
    q = with_bits(qa, calib, ["c1"], 8)
    assert q.eight_bit() == ["c1"]
    assert q.feature_maps["c1"].frac_bits == frac_bits_for(calib.feature_maps["c1"], 8)
    assert qa.eight_bit() == []
