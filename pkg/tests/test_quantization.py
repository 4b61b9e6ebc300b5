import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sarcodesign.adversarial import eval_clean
from sarcodesign.model import FC, BatchNorm, Conv, Flatten, ReLU, build_model, forward
from sarcodesign.quantization import (ActQuant, QuantBlock, QuantizationError, QuantModel, act_qparams,
                                      calibrate_activations, deserialize_qmodel, fuse_model, load_qmodel,
                                      quant_infer, quantize_activation, quantize_model, quantize_weights,
                                      requantize, round_half_even, save_qmodel, serialize_qmodel)
from conftest import tiny_model


def test_weight_example():
    q, scale = quantize_weights([-2.54, 1.0, 0.0])
    assert scale == np.float32(0.02)
    assert q.dtype == np.int8 and q.tolist() == [-127, 50, 0]


def test_zero_weights_fall_back_to_unit_scale():
    q, scale = quantize_weights(np.zeros((3, 2)))
    assert scale == 1.0 and not q.any()


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float32, st.integers(1, 64), elements=st.floats(-10, 10, width=32)))
def test_weight_dequant_error_bound(w):
    q, scale = quantize_weights(w)
    assert np.abs(q).max() <= 127
    err = np.abs(q.astype(np.float64) * np.float64(scale) - w.astype(np.float64))
    assert np.all(err <= np.float64(scale) / 2 * (1 + 1e-6))


def test_activation_range_example():
    aq = act_qparams(0.0, 5.1)
    assert aq.scale == np.float32(0.02) and aq.zero_point == -128
    assert quantize_activation(1.0, aq) == -78


@pytest.mark.parametrize("c,zp", [(3.0, -128), (-200.0, 72), (0.0, -128), (-300.0, 127)])
def test_constant_activation_fallback(c, zp):
    aq = act_qparams(c, c)
    assert aq.scale == 1.0 and aq.zero_point == zp


@pytest.mark.parametrize("a", [0.5, 1.0, 3.7])
def test_symmetric_range_zero_point(a):
    assert act_qparams(-a, a).zero_point == 0


def test_round_half_even():
    assert round_half_even([0.5, 1.5, 2.5, -0.5, -1.5]).tolist() == [0, 2, 2, 0, -2]


def test_requantize_relu_clamps_at_zero_point():
    out = requantize(np.array([-1000, -3, 0, 3, 10_000]), 0.5, -20, relu=True)
    assert out.tolist() == [-20, -20, -20, -18, 127]
    assert requantize(np.array([-1000]), 0.5, -20, relu=False).tolist() == [-128]


# ------------------------------------------------------------------ fusion


def test_fusion_removes_batchnorm_and_matches_eval(rng):
    g = tiny_model(seed=3)
    for i in (1, 5):
        g.params[i]["running_mean"] = rng.normal(size=g.params[i]["running_mean"].shape).astype(np.float32)
        g.params[i]["running_var"] = rng.uniform(0.5, 2, g.params[i]["running_var"].shape).astype(np.float32)
    fused = fuse_model(g)
    assert not any(isinstance(s, BatchNorm) for s in fused.layers)
    x = rng.uniform(size=(4, 1, 8, 8)).astype(np.float32)
    np.testing.assert_allclose(forward(fused, x)[0], forward(g, x)[0], rtol=1e-4, atol=1e-5)


def test_fusion_requires_preceding_conv():
    g = build_model("b", (1, 6, 6), 2, [Conv(2, 3), ReLU(), BatchNorm(), Flatten(), FC(2)])
    with pytest.raises(QuantizationError, match="directly follow"):
        fuse_model(g)


def test_empty_calibration_rejected():
    with pytest.raises(QuantizationError, match="empty"):
        calibrate_activations(tiny_model(), np.zeros((0, 1, 8, 8), np.float32))


# ----------------------------------------------------------------- inference


def _zero_bias_model():
    g = tiny_model(seed=4, bn=False)
    for p in g.params.values():
        p["bias"][:] = 0
    return g


def test_zero_image_propagates_zero_points(rng):
    g = _zero_bias_model()
    calib = rng.uniform(size=(16, 1, 8, 8)).astype(np.float32)
    calib[0] = 0
    qm = quantize_model(g, calib)
    trace = []
    logits = quant_infer(qm, np.zeros((1, 8, 8), np.float32), trace)
    zps = [qm.act_in.zero_point] + [b.act_out.zero_point for b in qm.blocks[:-1]]
    assert len(trace) == len(zps)
    for q, zp in zip(trace, zps):
        assert np.all(q == zp)
    assert np.all(logits == logits[0])


def _unit_model(weight_q, bias_q=0):
    unit = ActQuant(np.float32(1.0), 0)
    conv = QuantBlock("conv0", "conv", np.full((1, 1, 1, 1), weight_q, np.int8), np.array([bias_q], np.int32),
                      np.float32(1.0), unit, unit, in_dims=(1, 1, 1), conv_out_dims=(1, 1, 1), out_dims=(1, 1, 1),
                      flatten=True)
    fc = QuantBlock("fc1", "fc", np.ones((1, 1), np.int8), np.zeros(1, np.int32), np.float32(1.0), unit, None,
                    in_dims=(1,), conv_out_dims=(1,), out_dims=(1,))
    return QuantModel("unit", (1, 1, 1), 1, [conv, fc])


def test_unit_scale_conv():
    trace = []
    logits = quant_infer(_unit_model(3), np.full((1, 1, 1), 5.0, np.float32), trace)
    assert trace[1].tolist() == [[15]]
    assert logits.tolist() == [15.0]


def test_accumulator_overflow_detected():
    qm = _unit_model(127, bias_q=2**31 - 1)
    with pytest.raises(OverflowError):
        quant_infer(qm, np.full((1, 1, 1), 100.0, np.float32))


def test_quant_infer_bit_reproducible(desk_qmodel, desk_test):
    a = quant_infer(desk_qmodel, desk_test.x[:16])
    b = quant_infer(desk_qmodel, desk_test.x[:16])
    assert a.tobytes() == b.tobytes()
    assert quant_infer(desk_qmodel, desk_test.x[3]).tobytes() == a[3].tobytes()


def test_quant_model_structure(desk_qmodel):
    assert [b.name for b in desk_qmodel.blocks] == ["conv0", "conv4", "fc9"]
    for b in desk_qmodel.blocks:
        assert b.weight.dtype == np.int8 and b.bias.dtype == np.int32
        assert b.w_scale > 0 and b.act_in.scale > 0
        assert -128 <= b.act_in.zero_point <= 127
    assert desk_qmodel.blocks[-1].act_out is None


def test_serialization_round_trip(desk_qmodel, desk_test, tmp_path):
    blob = serialize_qmodel(desk_qmodel)
    again = deserialize_qmodel(blob)
    assert serialize_qmodel(again) == blob
    save_qmodel(desk_qmodel, tmp_path / "q.bin")
    x = desk_test.x[:8]
    assert quant_infer(load_qmodel(tmp_path / "q.bin"), x).tobytes() == quant_infer(desk_qmodel, x).tobytes()


def test_agreement_with_float_model(desk_model, desk_qmodel, desk_test):
    ref = forward(desk_model, desk_test.x)[0].argmax(axis=1)
    got = quant_infer(desk_qmodel, desk_test.x).argmax(axis=1)
    assert np.mean(ref == got) >= 0.95
    assert eval_clean(desk_model, desk_test) > 0.8
