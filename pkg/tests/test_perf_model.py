import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarcodesign.model import FC, BatchNorm, Conv, Flatten, MaxPool, ReLU, build_model, prune_channel
from sarcodesign.perf_model import (DEFAULT_CONSTANTS, OBJECTIVES, ConvDims, HwConstants, PEPolicy, PoolDims,
                                    channel_gain, conv_latency, conv_latency_parts, conv_resources, folds,
                                    maxpool_latency, maxpool_resources, model_cost)
from conftest import tiny_model
from oracles import chain_cost, conv_cycles, conv_dsp_bram, pool_cycles, pool_dsp_bram

BASE = ConvDims(c_in=2, c_out=4, k=3, s=1, w_in=8, h_out=6, w_out=6)


def test_conv_latency_breakdown():
    parts = conv_latency_parts(BASE, 4)
    assert parts["input_load"] == 27 and parts["t_loop"] == 9 and parts["t_buffer"] == 11
    assert parts["compute"] == 631 and parts["total"] == 658


@pytest.mark.parametrize("dims,n_pe,first,expected", [
    (BASE, 4, False, 658),
    (BASE._replace(c_out=8), 4, False, 1289),
    (BASE, 4, True, 637),
])
def test_conv_latency_examples(dims, n_pe, first, expected):
    assert conv_latency(dims, n_pe, is_first_layer=first) == expected


@pytest.mark.parametrize("dims,n_pe,expected", [
    (PoolDims(4, 6, 3, 0), 4, 158),
    (PoolDims(8, 6, 3, 0), 4, 266),
    (PoolDims(5, 1, 1, 0), 5, 56),
])
def test_maxpool_latency_examples(dims, n_pe, expected):
    assert maxpool_latency(dims, n_pe) == expected


@pytest.mark.parametrize("k,c_in,n_pe,dsp,bram", [(3, 2, 16, 93, 6), (1, 1, 1, 1, 1), (5, 16, 8, 129, 80)])
def test_conv_resources(k, c_in, n_pe, dsp, bram):
    assert tuple(conv_resources(k, c_in, n_pe)) == (dsp, bram)


@pytest.mark.parametrize("n_pe,dsp,bram", [(16, 14, 16), (8, 9, 8), (1, 5, 1)])
def test_maxpool_resources(n_pe, dsp, bram):
    assert tuple(maxpool_resources(n_pe)) == (dsp, bram)


def test_exact_ceiling_at_integer_boundary():
    # 156 / 1.56 is exactly 100 and must not round up to 101
    assert conv_resources(1, 1, 156)[0] == 100
    assert maxpool_resources(32)[0] == 20 + 4


@pytest.mark.parametrize("bad", [BASE._replace(c_in=0), BASE._replace(h_out=0)])
def test_nonpositive_dims_rejected(bad):
    with pytest.raises(ValueError):
        conv_latency(bad, 4)


def test_policy_rules():
    assert PEPolicy("streaming", 8).n_pe(5) == 5
    assert PEPolicy("streaming", 8).n_pe(20) == 8
    assert PEPolicy("temporal", 16).n_pe(5) == 16
    assert folds(20, 8) == 3 and folds(8, 8) == 1
    with pytest.raises(ValueError):
        PEPolicy("streaming", 12)
    with pytest.raises(ValueError):
        PEPolicy("pipelined", 8)


def test_constants_override_and_validation():
    hw = HwConstants.from_mapping({"t_ov": 0.5 + 0.5, "d_maxpool": 10})
    assert maxpool_latency(PoolDims(4, 6, 3), 4, hw) == 108 + 10
    with pytest.raises(ValueError, match="unknown"):
        HwConstants.from_mapping({"t_overhead": 3})
    with pytest.raises(ValueError, match="positive"):
        HwConstants(d_b=0)


@settings(max_examples=200, deadline=None)
@given(c_in=st.integers(1, 64), c_out=st.integers(1, 64), k=st.sampled_from([1, 3, 5, 7]),
       s=st.integers(1, 3), w_in=st.integers(1, 64), h_out=st.integers(1, 32), w_out=st.integers(1, 32),
       n_pe=st.sampled_from([1, 2, 4, 8, 16, 32, 64]), first=st.booleans())
def test_conv_latency_matches_formula(c_in, c_out, k, s, w_in, h_out, w_out, n_pe, first):
    d = ConvDims(c_in, c_out, k, s, w_in, h_out, w_out)
    assert conv_latency(d, n_pe, is_first_layer=first) == conv_cycles(c_in, c_out, k, s, w_in, h_out, w_out,
                                                                      n_pe, first)
    assert tuple(conv_resources(k, c_in, n_pe)) == conv_dsp_bram(k, c_in, n_pe)


@settings(max_examples=200, deadline=None)
@given(c=st.integers(1, 128), h_in=st.integers(1, 64), w_out=st.integers(1, 32), p=st.integers(0, 2),
       n_pe=st.sampled_from([1, 4, 8, 16, 32, 64]))
def test_maxpool_latency_matches_formula(c, h_in, w_out, p, n_pe):
    assert maxpool_latency(PoolDims(c, h_in, w_out, p), n_pe) == pool_cycles(c, h_in, w_out, p, n_pe)
    assert tuple(maxpool_resources(n_pe)) == pool_dsp_bram(n_pe)


# ------------------------------------------------------------ whole model


@pytest.fixture(params=[("streaming", 8), ("streaming", 16), ("temporal", 8), ("temporal", 32)],
                ids=lambda p: f"{p[0]}-{p[1]}")
def policy(request):
    return PEPolicy(*request.param)


@pytest.mark.parametrize("c1,c2,side", [(3, 4, 8), (10, 20, 16), (17, 9, 12)])
def test_model_cost_matches_chain_oracle(policy, c1, c2, side):
    g = tiny_model(c1=c1, c2=c2, side=side)
    rep = model_cost(g, policy)
    ref = chain_cost(g, policy.pe_max, policy.mode)
    assert (rep.cycles, rep.dsp, rep.bram, rep.macs) == (ref["latency"], ref["dsp"], ref["bram"], ref["macs"])
    assert rep.cycles == sum(lc.cycles for lc in rep.layers)
    assert rep.macs == sum(lc.macs for lc in rep.layers)
    if policy.mode == "streaming":
        assert rep.dsp == sum(lc.dsp for lc in rep.layers)


def test_fc_and_relu_are_free():
    g = tiny_model()
    rep = model_cost(g, PEPolicy())
    fc = [lc for lc in rep.layers if lc.kind == "fc"][0]
    assert (fc.cycles, fc.dsp, fc.bram) == (0, 0, 0) and fc.macs > 0
    assert len(rep.layers) == 5  # two conv, two pool, one fc


def test_report_helpers():
    rep = model_cost(tiny_model(), PEPolicy())
    assert rep.latency_seconds == pytest.approx(rep.cycles / 300e6)
    assert [rep.objective(o) for o in OBJECTIVES] == [rep.macs, rep.cycles, rep.dsp, rep.bram]
    with pytest.raises(ValueError):
        rep.objective("power")
    lines = rep.to_csv().splitlines()
    assert lines[0] == "layer,cycles,dsp,bram,macs"
    assert lines[1].startswith("0_conv,")
    assert lines[-1] == f"total,{rep.cycles},{rep.dsp},{rep.bram},{rep.macs}"
    assert "mode=streaming" in rep.table()


def test_macs_gain_example():
    g = build_model("g", (2, 10, 10), 3, [Conv(4, 3), ReLU(), Conv(5, 3, stride=2), Flatten(), FC(3)])
    gain = channel_gain(g, (0, 1), "macs", PEPolicy())
    assert gain == 2 * 9 * 8 * 8 + 9 * 5 * 3 * 3


def test_latency_gain_from_next_layer_loop():
    # layer 0 has C <= pe_max, so its own fold count never changes; the next
    # conv loses one cycle of t_loop per output pixel per fold
    g = build_model("g", (1, 10, 10), 3, [Conv(4, 3), ReLU(), Conv(12, 3), Flatten(), FC(3)])
    pol = PEPolicy("streaming", 8)
    assert channel_gain(g, (0, 0), "latency", pol) == math.ceil(12 / 8) * 6 * 6


def test_temporal_dsp_gain_zero_for_non_widest():
    g = build_model("g", (1, 10, 10), 3, [Conv(4, 3), ReLU(), Conv(12, 3), Flatten(), FC(3)])
    pol = PEPolicy("temporal", 8)
    # conv0 feeds 4 channels into conv2 (BRAM c_in*k) but DSP depends only on N_pe and K
    assert channel_gain(g, (0, 0), "dsp", pol) == 0
    assert channel_gain(g, (2, 3), "dsp", pol) == 0


def test_gain_rejects_bad_channel():
    with pytest.raises(ValueError):
        channel_gain(tiny_model(), (0, 99), "latency", PEPolicy())


@st.composite
def graphs(draw):
    layers = [Conv(draw(st.integers(2, 20)), draw(st.sampled_from([1, 3])), pad=1), BatchNorm(), ReLU()]
    if draw(st.booleans()):
        layers.append(MaxPool(2))
    layers += [Conv(draw(st.integers(2, 20)), 3, pad=1), ReLU(), MaxPool(2), Flatten()]
    if draw(st.booleans()):
        layers += [FC(draw(st.integers(2, 12))), ReLU()]
    layers.append(FC(3))
    return build_model("p", (1, 12, 12), 3, layers)


@settings(max_examples=40, deadline=None)
@given(g=graphs(), mode=st.sampled_from(["streaming", "temporal"]), pe=st.sampled_from([8, 16]), data=st.data())
def test_gain_nonnegative_and_cost_monotone(g, mode, pe, data):
    pol = PEPolicy(mode, pe)
    cid = data.draw(st.sampled_from(g.prunable_channels()))
    before = model_cost(g, pol)
    after = model_cost(prune_channel(g, cid), pol)
    for obj in OBJECTIVES:
        gain = channel_gain(g, cid, obj, pol)
        assert gain >= 0
        assert gain == before.objective(obj) - after.objective(obj)
        assert after.objective(obj) <= before.objective(obj)


def test_gain_is_shared_by_channels_of_a_layer():
    g = tiny_model(c1=10, c2=20, side=16)
    pol = PEPolicy()
    gains = {channel_gain(g, (0, c), "latency", pol) for c in range(10)}
    assert len(gains) == 1
    assert np.isfinite(list(gains)[0])
    assert DEFAULT_CONSTANTS.clock_hz == 300e6
