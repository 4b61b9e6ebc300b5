"""Analytical latency and DSP/BRAM model for the conv (CCE) and max-pool (MCE)
engines, aggregated over a whole model.

All latencies are integer clock cycles.  FC layers contribute MACs only.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from fractions import Fraction
from typing import NamedTuple

from .model import FC, ChannelId, Conv, MaxPool, ModelGraph, count_macs, prune_layers, shape_inference

OBJECTIVES = ("macs", "latency", "dsp", "bram")
PE_MAX_CHOICES = (8, 16, 32, 64)


@dataclass(frozen=True)
class HwConstants:
    ii_input: int = 1
    ii_conv: int = 1
    ii_b: int = 1
    d_input: int = 3
    d_b: int = 3
    d_conv: int = 7
    t_ov: int = 7
    ii_maxpool: int = 6
    d_maxpool: int = 50
    rho1: float = 1.56
    rho2: float = 1.6
    d_ov: int = 4
    clock_hz: float = 300e6

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"hardware constant {f.name} must be positive")

    @classmethod
    def from_mapping(cls, values: dict | None) -> "HwConstants":
        values = dict(values or {})
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown hw_constants field(s): {sorted(unknown)}")
        return cls(**values)


DEFAULT_CONSTANTS = HwConstants()


@dataclass(frozen=True)
class PEPolicy:
    """Streaming: one engine per layer with ``min(C, pe_max)`` PEs.
    Temporal: one shared engine with ``pe_max`` PEs."""

    mode: str = "streaming"
    pe_max: int = 8

    def __post_init__(self):
        if self.mode not in ("streaming", "temporal"):
            raise ValueError(f"mode must be 'streaming' or 'temporal', got {self.mode!r}")
        if self.pe_max not in PE_MAX_CHOICES:
            raise ValueError(f"pe_max must be one of {PE_MAX_CHOICES}, got {self.pe_max}")

    def n_pe(self, channels: int) -> int:
        return min(channels, self.pe_max) if self.mode == "streaming" else self.pe_max


def folds(channels: int, n_pe: int) -> int:
    return -(-channels // n_pe)


class ConvDims(NamedTuple):
    c_in: int
    c_out: int
    k: int
    s: int
    w_in: int
    h_out: int
    w_out: int


class PoolDims(NamedTuple):
    c: int
    h_in: int
    w_out: int
    p: int = 0


class Resources(NamedTuple):
    dsp: int
    bram: int


def conv_latency_parts(d: ConvDims, n_pe: int, hw: HwConstants = DEFAULT_CONSTANTS,
                       is_first_layer: bool = False) -> dict[str, int]:
    if min(d) < 1 or n_pe < 1:
        raise ValueError(f"conv dims and N_pe must be positive: {d}, N_pe={n_pe}")
    # the first layer's input is partitioned along its width, dropping the W_in factor
    load = d.k * (1 if is_first_layer else d.w_in) * hw.ii_input + hw.d_input
    t_loop = d.c_in * hw.ii_conv + hw.d_conv
    t_buffer = d.s * d.w_in * hw.ii_b + hw.d_b
    nf = folds(d.c_out, n_pe)
    per_fold = d.h_out * d.w_out * (t_loop + hw.t_ov) + (d.h_out - 1) * t_buffer
    return {"input_load": load, "t_loop": t_loop, "t_buffer": t_buffer, "folds": nf,
            "per_fold": per_fold, "compute": nf * per_fold, "total": load + nf * per_fold}


def conv_latency(d: ConvDims, n_pe: int, hw: HwConstants = DEFAULT_CONSTANTS, is_first_layer: bool = False) -> int:
    return conv_latency_parts(d, n_pe, hw, is_first_layer)["total"]


def maxpool_latency(d: PoolDims, n_pe: int, hw: HwConstants = DEFAULT_CONSTANTS) -> int:
    # (H_in + 2P) x (W_out + 2P) taken literally from the engine model
    if d.c < 1 or d.h_in < 1 or d.w_out < 1 or d.p < 0 or n_pe < 1:
        raise ValueError(f"invalid pool dims {d} / N_pe={n_pe}")
    return folds(d.c, n_pe) * (d.h_in + 2 * d.p) * (d.w_out + 2 * d.p) * hw.ii_maxpool + hw.d_maxpool


def _ceil_div(num: int, factor: float) -> int:
    # the packing factors are decimal constants; divide exactly to avoid 1-ulp ceilings
    return math.ceil(Fraction(num) / Fraction(str(factor)))


def conv_resources(k: int, c_in: int, n_pe: int, hw: HwConstants = DEFAULT_CONSTANTS) -> Resources:
    return Resources(_ceil_div(n_pe * k * k, hw.rho1), c_in * k)


def maxpool_resources(n_pe: int, hw: HwConstants = DEFAULT_CONSTANTS) -> Resources:
    return Resources(_ceil_div(n_pe, hw.rho2) + hw.d_ov, n_pe)


# ----------------------------------------------------------------- whole model


@dataclass(frozen=True)
class LayerCost:
    index: int
    kind: str  # "conv", "maxpool" or "fc"
    cycles: int
    dsp: int
    bram: int
    macs: int
    n_pe: int = 0
    folds: int = 0
    is_first: bool = False


@dataclass(frozen=True)
class CostReport:
    layers: tuple[LayerCost, ...]
    mode: str
    cycles: int
    dsp: int
    bram: int
    macs: int
    clock_hz: float

    @property
    def latency_seconds(self) -> float:
        return self.cycles / self.clock_hz

    def objective(self, name: str) -> float:
        if name == "latency":
            return self.cycles
        if name in ("macs", "dsp", "bram"):
            return getattr(self, name)
        raise ValueError(f"unknown objective {name!r}; choose from {OBJECTIVES}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "cycles", "dsp", "bram", "macs"])
        for lc in self.layers:
            w.writerow([f"{lc.index}_{lc.kind}", lc.cycles, lc.dsp, lc.bram, lc.macs])
        w.writerow(["total", self.cycles, self.dsp, self.bram, self.macs])
        return buf.getvalue()

    def table(self) -> str:
        rows = [f"{'layer':<12}{'PE':>4}{'folds':>6}{'cycles':>10}{'dsp':>7}{'bram':>7}{'macs':>10}"]
        for lc in self.layers:
            rows.append(f"{f'{lc.index}_{lc.kind}':<12}{lc.n_pe:>4}{lc.folds:>6}{lc.cycles:>10}"
                        f"{lc.dsp:>7}{lc.bram:>7}{lc.macs:>10}")
        rows.append(f"{'total':<22}{self.cycles:>10}{self.dsp:>7}{self.bram:>7}{self.macs:>10}")
        rows.append(f"mode={self.mode} latency={self.latency_seconds * 1e6:.3f} us")
        return "\n".join(rows)


def layer_costs(layers, input_dims, policy: PEPolicy, hw: HwConstants = DEFAULT_CONSTANTS) -> list[LayerCost]:
    shapes = shape_inference(layers, input_dims)
    macs = count_macs(layers, input_dims).per_layer
    first_conv = next(i for i, s in enumerate(layers) if isinstance(s, Conv))
    out = []
    for i, (s, sh) in enumerate(zip(layers, shapes)):
        if isinstance(s, Conv):
            c_in, _, w_in = sh.in_dims
            c_out, h_out, w_out = sh.out_dims
            n_pe = policy.n_pe(c_out)
            d = ConvDims(c_in, c_out, s.k, s.stride, w_in, h_out, w_out)
            res = conv_resources(s.k, c_in, n_pe, hw)
            out.append(LayerCost(i, "conv", conv_latency(d, n_pe, hw, i == first_conv), res.dsp, res.bram,
                                 macs[i], n_pe, folds(c_out, n_pe), i == first_conv))
        elif isinstance(s, MaxPool):
            c, h_in, _ = sh.in_dims
            n_pe = policy.n_pe(c)
            res = maxpool_resources(n_pe, hw)
            cyc = maxpool_latency(PoolDims(c, h_in, sh.out_dims[2], s.pad), n_pe, hw)
            out.append(LayerCost(i, "maxpool", cyc, res.dsp, res.bram, 0, n_pe, folds(c, n_pe)))
        elif isinstance(s, FC):
            out.append(LayerCost(i, "fc", 0, 0, 0, macs[i]))
    return out


def model_cost(graph, policy: PEPolicy, hw: HwConstants = DEFAULT_CONSTANTS, input_dims=None) -> CostReport:
    """Cost of a graph (or a bare layer list with ``input_dims``)."""
    if isinstance(graph, ModelGraph):
        layers, input_dims = graph.layers, graph.input_dims
    else:
        layers = graph
    recs = layer_costs(layers, input_dims, policy, hw)
    if policy.mode == "streaming":
        dsp = sum(r.dsp for r in recs)
        bram = sum(r.bram for r in recs)
    else:
        # one shared CCE and one shared MCE, each sized for its most demanding layer
        dsp = bram = 0
        for kind in ("conv", "maxpool"):
            eng = [r for r in recs if r.kind == kind]
            if eng:
                dsp += max(r.dsp for r in eng)
                bram += max(r.bram for r in eng)
    return CostReport(tuple(recs), policy.mode, sum(r.cycles for r in recs), dsp, bram,
                      sum(r.macs for r in recs), hw.clock_hz)


def layer_gain(graph: ModelGraph, layer: int, objective: str, policy: PEPolicy,
               hw: HwConstants = DEFAULT_CONSTANTS) -> float:
    """Cost drop from removing one channel of ``layer``; the same for every channel in it."""
    before = model_cost(graph, policy, hw).objective(objective)
    after = model_cost(prune_layers(graph, layer), policy, hw, graph.input_dims).objective(objective)
    return before - after


def channel_gain(graph: ModelGraph, cid, objective: str, policy: PEPolicy,
                 hw: HwConstants = DEFAULT_CONSTANTS) -> float:
    cid = ChannelId(*cid)
    if not 0 <= cid.channel < graph.channels(cid.layer):
        raise ValueError(f"channel {cid.channel} out of range for layer {cid.layer}")
    return layer_gain(graph, cid.layer, objective, policy, hw)
