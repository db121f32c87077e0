import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from edgeflow.net import DESK_CONFIG, NetConfig, forward, init_weights
from edgeflow.quantsim import (ACC_LIMIT, DEGENERATE_DELTA, QuantLayer, QuantParams, QuantizedModel,
                               activation_coverage, calibrate, dequantize, float_graph_forward, integer_conv,
                               load_quantized, quant_forward, quantize, round_half_away, save_quantized)
from edgeflow.synthgen import SceneDistribution, synth_arrays

SMALL = SceneDistribution(height=32, width=48, min_size=4.0, max_size=10.0)


@pytest.fixture(scope="module")
def calib():
    return synth_arrays(6, SMALL, 11)[0]


def test_identity_grid():
    qp = QuantParams(1.0, 0)
    assert quantize(5.0, qp) == 5 and dequantize(quantize(5.0, qp), qp) == 5.0


def test_saturation():
    assert quantize(-64.0, QuantParams(0.5, 128)) == 0
    assert quantize(1e9, QuantParams(0.5, 128)) == 255


def test_round_half_away():
    np.testing.assert_array_equal(round_half_away(np.array([2.5, -2.5, 0.5, -0.5, 1.49])), [3, -3, 1, -1, 1])
    t = torch.tensor([2.5, -2.5, 0.4999])
    assert torch.equal(round_half_away(t), torch.tensor([3.0, -3.0, 0.0]))


def test_error_bound_scan():
    r = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        qp = QuantParams(float(r.uniform(1e-4, 2.0)), int(r.integers(0, 256)))
        lo, hi = qp.representable()
        x = r.uniform(lo, hi, 1000)
        err = np.abs(dequantize(quantize(x, qp), qp) - x)
        worst = max(worst, float((err / qp.scale).max()))
    assert worst <= 0.5 + 1e-9


@given(st.floats(1e-3, 10), st.integers(0, 255), st.floats(-1e4, 1e4))
def test_codes_in_range(s, z, x):
    c = quantize(np.array([x]), QuantParams(s, z))
    assert c.dtype == np.uint8 and 0 <= int(c[0]) <= 255


def test_param_validation():
    with pytest.raises(ValueError):
        QuantParams(0.0, 0)
    with pytest.raises(ValueError):
        QuantParams(1.0, 256)
    qp = QuantParams.from_range(-1.0, 3.0)
    assert qp.scale == pytest.approx(4 / 255) and qp.zero_point == 64
    assert QuantParams.symmetric(1.27).zero_point == 128


def test_identity_conv_is_exact():
    conv = torch.nn.Conv2d(3, 3, 1)
    with torch.no_grad():
        conv.weight.copy_(torch.eye(3).view(3, 3, 1, 1))
        conv.bias.zero_()
    qp = QuantParams(0.25, 100)
    wqp = QuantParams.symmetric(1.0)
    layer = QuantLayer(quantize(conv.weight.detach().double().numpy(), wqp), wqp, np.zeros(3, np.int32), qp, qp,
                       qp.scale * wqp.scale / qp.scale)
    codes = torch.randint(0, 256, (1, 3, 5, 5)).double()
    out = integer_conv(codes, conv, layer)
    x = dequantize(codes, qp)
    assert torch.equal(dequantize(out, qp), conv.double()(x).detach())


def test_overflow_raises():
    conv = torch.nn.Conv2d(1, 1, 3, padding=1)
    qp = QuantParams(1.0, 0)
    wqp = QuantParams.symmetric(1.0)
    layer = QuantLayer(np.full((1, 1, 3, 3), 255, np.uint8), wqp, np.array([ACC_LIMIT], np.int32), qp, qp, 1e-9)
    with pytest.raises(OverflowError):
        integer_conv(torch.full((1, 1, 4, 4), 255.0, dtype=torch.float64), conv, layer)


def test_degenerate_weights_widened(calib):
    model = init_weights(DESK_CONFIG, 0)  # increment heads are all zero
    qw = calibrate(model, calib)
    layer = qw.layers["heads.1.flow"]
    assert layer.weight_qp.scale == pytest.approx(DEGENERATE_DELTA / 127)
    assert (layer.weight_codes == 128).all()
    assert any("heads.1.flow" in w for w in qw.warnings)


def test_duplicate_calibration_identical(tiny_model, calib):
    a = calibrate(tiny_model, calib[:1])
    b = calibrate(tiny_model, np.concatenate([calib[:1], calib[:1]]))
    assert a.activations == b.activations
    for k in a.layers:
        np.testing.assert_array_equal(a.layers[k].weight_codes, b.layers[k].weight_codes)


def test_graph_walk_matches_model(tiny_model, calib):
    ref = forward(calib, tiny_model)
    got = float_graph_forward(calib, tiny_model)
    torch.testing.assert_close(got.flow.float(), ref.flow, atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(got.uncertainty.float(), ref.uncertainty, atol=1e-5, rtol=1e-5)


def test_quant_close_to_float_and_bit_stable(tiny_model, calib):
    qw = calibrate(tiny_model, calib)
    for layer in qw.layers.values():
        assert layer.weight_codes.dtype == np.uint8
    a = quant_forward(calib, tiny_model, qw)
    b = quant_forward(calib, tiny_model, qw)
    assert torch.equal(a.flow, b.flow) and torch.equal(a.uncertainty, b.uncertainty)
    ref = float_graph_forward(calib, tiny_model)
    span = float(ref.flow.abs().max())
    assert float((a.flow - ref.flow).abs().mean()) < 0.05 * span


def test_coverage_on_probe(tiny_model, calib):
    qw = calibrate(tiny_model, calib)
    assert activation_coverage(tiny_model, qw, calib) == 1.0
    probe = synth_arrays(6, SMALL, 12)[0]
    assert activation_coverage(tiny_model, qw, probe) > 0.99


def test_shift50_bias_folded(calib):
    model = init_weights(NetConfig(output_mode="shift50"), 0)
    qw = calibrate(model, calib)
    q = quant_forward(calib, model, qw)
    ref = forward(calib, model)
    # head output sits near +50; dequantized flow must still be the unshifted field
    assert float((q.flow.float() - ref.flow).abs().mean()) < 0.5


def test_checkpoint_roundtrip(tmp_path, tiny_model, calib):
    qw = calibrate(tiny_model, calib)
    save_quantized(qw, tmp_path / "q.npz")
    qw2 = load_quantized(tmp_path / "q.npz")
    assert qw2.config == qw.config and qw2.activations == qw.activations
    a = QuantizedModel(tiny_model, qw)(calib)
    b = QuantizedModel(tiny_model, qw2)(calib)
    np.testing.assert_array_equal(a, b)
    np.savez(tmp_path / "bad.npz", __meta__=np.array('{"format": "nope"}'))
    with pytest.raises(ValueError):
        load_quantized(tmp_path / "bad.npz")


def test_calibration_needs_samples(tiny_model):
    with pytest.raises(ValueError):
        calibrate(tiny_model, np.zeros((0, 32, 48, 6), np.uint8))
