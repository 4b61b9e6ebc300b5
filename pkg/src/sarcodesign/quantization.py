"""Post-training INT8 quantization and the integer reference inference.

Weights use one symmetric scale per tensor (codes in [-127, 127]); activations
use an asymmetric scale/zero-point per quantization point.  A quantized model
is a chain of blocks, each one conv or FC layer plus the ReLU / max-pool /
flatten layers that follow it.  Inside a block the int32 accumulator is
max-pooled first and requantized afterwards; ReLU becomes a clamp at the
output zero-point.  All rounding is round-half-even.
"""

from __future__ import annotations

import dataclasses
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import tensorfile
from .model import (FC, BatchNorm, Conv, Flatten, MaxPool, ModelGraph, ReLU, forward, kind_name,
                    layer_to_entry, layer_from_entry)

QMIN, QMAX = -128, 127
ACC_LIMIT = 2**31


class QuantizationError(ValueError):
    pass


def round_half_even(x) -> np.ndarray:
    return np.rint(x)


# --------------------------------------------------------------------- weights


def quantize_weights(w) -> tuple[np.ndarray, np.float32]:
    w = np.asarray(w, dtype=np.float64)
    peak = float(np.abs(w).max()) if w.size else 0.0
    scale = np.float32(peak / 127.0) if peak > 0 else np.float32(1.0)
    q = np.clip(round_half_even(w / np.float64(scale)), -127, 127).astype(np.int8)
    return q, scale


def quantize_bias(b, in_scale, w_scale) -> np.ndarray:
    q = round_half_even(np.asarray(b, np.float64) / (np.float64(in_scale) * np.float64(w_scale)))
    return np.clip(q, -(2**31), 2**31 - 1).astype(np.int32)


# ----------------------------------------------------------------- activations


@dataclass(frozen=True)
class ActQuant:
    scale: np.float32
    zero_point: int


def act_qparams(lo: float, hi: float) -> ActQuant:
    scale = np.float32((hi - lo) / 255.0)
    if not scale > 0:
        scale = np.float32(1.0)
    if hi > lo:
        # exact rational so that a symmetric range lands on the .5 tie and rounds to even
        zp = round(-128 - Fraction(lo) * 255 / (Fraction(hi) - Fraction(lo)))
    else:
        zp = int(round_half_even(-128.0 - lo))
    return ActQuant(scale, int(np.clip(zp, QMIN, QMAX)))


def quantize_activation(x, aq: ActQuant) -> np.ndarray:
    q = round_half_even(np.asarray(x, np.float64) / np.float64(aq.scale)) + aq.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize_activation(q, aq: ActQuant) -> np.ndarray:
    return (np.asarray(q, np.float64) - aq.zero_point) * np.float64(aq.scale)


def requantize(acc, multiplier: float, zp_out: int, relu: bool) -> np.ndarray:
    """``clamp(round_half_even(acc * M) + zp_out)``; ReLU clamps at ``zp_out``."""
    r = round_half_even(np.asarray(acc, np.float64) * np.float64(multiplier)) + zp_out
    r = np.clip(r, zp_out if relu else QMIN, QMAX)
    return r.astype(np.int8)


# ---------------------------------------------------------------------- fusion


def fuse_model(graph: ModelGraph) -> ModelGraph:
    """Fold every batch-norm layer into the conv/FC directly before it."""
    layers, params = [], {}
    for i, s in enumerate(graph.layers):
        p = graph.params.get(i, {})
        if isinstance(s, BatchNorm):
            prev = len(layers) - 1
            if prev < 0 or not isinstance(layers[prev], (Conv, FC)):
                raise QuantizationError(f"layer {i}: batch norm must directly follow a conv/FC layer to be fused")
            w, b = T.fuse_batchnorm(params[prev]["weight"], params[prev].get("bias"), p["gamma"], p["beta"],
                                    p["running_mean"], p["running_var"], s.eps)
            params[prev] = {"weight": w, "bias": b}
            if not layers[prev].bias:
                layers[prev] = dataclasses.replace(layers[prev], bias=True)
            continue
        if p:
            params[len(layers)] = {k: v.copy() for k, v in p.items()}
        layers.append(s)
    return ModelGraph(graph.name, graph.input_dims, graph.classes, tuple(layers), params, graph.seed)


@dataclass(frozen=True)
class BlockPlan:
    param_layer: int  # index in the fused graph
    end_layer: int  # last layer belonging to the block
    pool: MaxPool | None
    relu: bool
    flatten: bool


def plan_blocks(layers) -> list[BlockPlan]:
    starts = [i for i, s in enumerate(layers) if isinstance(s, (Conv, FC))]
    plans = []
    for n, start in enumerate(starts):
        end = (starts[n + 1] if n + 1 < len(starts) else len(layers)) - 1
        pool, relu, flat = None, False, False
        for s in layers[start + 1:end + 1]:
            if isinstance(s, MaxPool):
                if pool is not None:
                    raise QuantizationError("at most one max-pool per conv block is supported")
                pool = s
            elif isinstance(s, ReLU):
                relu = True
            elif isinstance(s, Flatten):
                flat = True
            else:
                raise QuantizationError(f"unexpected {kind_name(s)} layer inside a quantized block")
        plans.append(BlockPlan(start, end, pool, relu, flat))
    return plans


# ---------------------------------------------------------------- calibration


def calibrate_activations(graph: ModelGraph, calib_x, batch_size: int = 256) -> list[ActQuant]:
    """Min/max calibration of the model input and every block output but the last.

    ``graph`` may still contain batch norm; it is fused first.
    """
    fused = fuse_model(graph)
    plans = plan_blocks(fused.layers)
    x = np.asarray(calib_x, dtype=np.float32)
    if x.ndim == 3 and graph.input_dims[0] == 1 and x.shape[1:] == graph.input_dims[1:]:
        x = x[:, None]
    if len(x) == 0:
        raise QuantizationError("calibration set is empty")
    points = [-1] + [p.end_layer for p in plans[:-1]]
    lo = np.full(len(points), np.inf)
    hi = np.full(len(points), -np.inf)
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        _, cache = forward(fused, xb)
        for j, layer in enumerate(points):
            a = xb if layer < 0 else cache.outputs[layer]
            lo[j] = min(lo[j], float(a.min()))
            hi[j] = max(hi[j], float(a.max()))
    return [act_qparams(a, b) for a, b in zip(lo, hi)]


# -------------------------------------------------------------- quant model


@dataclass
class QuantBlock:
    name: str
    kind: str  # "conv" or "fc"
    weight: np.ndarray  # int8, O x I x K x K or O x I
    bias: np.ndarray  # int32, O
    w_scale: np.float32
    act_in: ActQuant
    act_out: ActQuant | None  # None for the final classifier (dequantized)
    stride: int = 1
    pad: int = 0
    pool: MaxPool | None = None
    relu: bool = False
    flatten: bool = False
    in_dims: tuple = ()
    conv_out_dims: tuple = ()  # before pooling
    out_dims: tuple = ()  # block output

    @property
    def multiplier(self) -> float:
        """Requantization multiplier ``s_in * s_w / s_out`` (float64)."""
        return float(np.float64(self.act_in.scale) * np.float64(self.w_scale) / np.float64(self.act_out.scale))

    @property
    def acc_scale(self) -> float:
        return float(np.float64(self.act_in.scale) * np.float64(self.w_scale))

    @property
    def k(self) -> int:
        return self.weight.shape[2] if self.kind == "conv" else 1


@dataclass
class QuantModel:
    name: str
    input_dims: tuple
    classes: int
    blocks: list[QuantBlock] = field(default_factory=list)

    @property
    def act_in(self) -> ActQuant:
        return self.blocks[0].act_in


def quantize_model(graph: ModelGraph, calib_x) -> QuantModel:
    fused = fuse_model(graph)
    fused.check_params()
    plans = plan_blocks(fused.layers)
    acts = calibrate_activations(graph, calib_x)
    shapes = fused.shapes
    # name blocks by their index in the unfused graph so they line up with channel ids
    orig = [i for i, s in enumerate(graph.layers) if not isinstance(s, BatchNorm)]
    blocks = []
    for n, plan in enumerate(plans):
        spec = fused.layers[plan.param_layer]
        p = fused.params[plan.param_layer]
        wq, ws = quantize_weights(p["weight"])
        a_in = acts[n]
        bias = p.get("bias", np.zeros(spec.out, np.float32))
        a_out = acts[n + 1] if n + 1 < len(plans) else None
        if isinstance(spec, Conv) and p["weight"].shape[1] * spec.k**2 > 2**15:
            raise QuantizationError(f"layer {plan.param_layer}: C_in*K^2 too large for int32 accumulation")
        blocks.append(QuantBlock(
            name=f"{kind_name(spec)}{orig[plan.param_layer]}",
            kind=kind_name(spec),
            weight=wq,
            bias=quantize_bias(bias, a_in.scale, ws),
            w_scale=ws,
            act_in=a_in,
            act_out=a_out,
            stride=getattr(spec, "stride", 1),
            pad=getattr(spec, "pad", 0),
            pool=plan.pool,
            relu=plan.relu,
            flatten=plan.flatten,
            in_dims=tuple(shapes[plan.param_layer].in_dims),
            conv_out_dims=tuple(shapes[plan.param_layer].out_dims),
            out_dims=tuple(shapes[plan.end_layer].out_dims),
        ))
    return QuantModel(graph.name, graph.input_dims, graph.classes, blocks)


# ----------------------------------------------------------- integer inference


def int_conv_acc(q_in, blk: QuantBlock) -> np.ndarray:
    """int64 accumulators of a conv block; padding contributes exact zeros."""
    centred = q_in.astype(np.int64) - blk.act_in.zero_point
    acc, _ = T.conv2d_fwd(centred, blk.weight.astype(np.int64), None, blk.stride, blk.pad)
    return acc + blk.bias.astype(np.int64)[None, :, None, None]


def int_maxpool(acc, pool: MaxPool) -> np.ndarray:
    # float64 holds every int32 exactly, and -inf padding never wins
    out, _ = T.maxpool_fwd(acc.astype(np.float64), pool.k, pool.step, pool.pad)
    return out.astype(np.int64)


def _check_acc(acc, name):
    if acc.size and (acc.max() >= ACC_LIMIT or acc.min() < -ACC_LIMIT):
        raise OverflowError(f"{name}: accumulator exceeds 32 bits")


def quant_infer(qm: QuantModel, image, trace: list | None = None) -> np.ndarray:
    """Integer-only inference; returns float64 logits (dequantized final FC).

    Accepts one image or an ``N x C x H x W`` batch.  When ``trace`` is a list,
    each block's integer output is appended to it.
    """
    x = np.asarray(image, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    q = quantize_activation(x, qm.act_in)
    if trace is not None:
        trace.append(q)
    logits = None
    for blk in qm.blocks:
        if blk.kind == "conv":
            acc = int_conv_acc(q, blk)
            if blk.pool is not None:
                acc = int_maxpool(acc, blk.pool)
        else:
            q2 = q.reshape(q.shape[0], -1).astype(np.int64) - blk.act_in.zero_point
            acc = q2 @ blk.weight.astype(np.int64).T + blk.bias.astype(np.int64)
        _check_acc(acc, blk.name)
        if blk.act_out is None:
            logits = acc.astype(np.float64) * blk.acc_scale
            break
        q = requantize(acc, blk.multiplier, blk.act_out.zero_point, blk.relu)
        if blk.flatten:
            q = q.reshape(q.shape[0], -1)
        if trace is not None:
            trace.append(q)
    return logits[0] if single else logits


# -------------------------------------------------------------- serialization

MAGIC = b"ARQM"


def serialize_qmodel(qm: QuantModel) -> bytes:
    blocks, arrays = [], {}
    for b in qm.blocks:
        blocks.append({
            "name": b.name, "kind": b.kind, "w_scale": float(b.w_scale),
            "act_in": [float(b.act_in.scale), b.act_in.zero_point],
            "act_out": None if b.act_out is None else [float(b.act_out.scale), b.act_out.zero_point],
            "stride": b.stride, "pad": b.pad, "relu": b.relu, "flatten": b.flatten,
            "pool": None if b.pool is None else layer_to_entry(b.pool)["maxpool"],
            "in_dims": list(b.in_dims), "conv_out_dims": list(b.conv_out_dims), "out_dims": list(b.out_dims),
        })
        arrays[f"{b.name}.weight"] = b.weight
        arrays[f"{b.name}.bias"] = b.bias
    header = {"name": qm.name, "input": list(qm.input_dims), "classes": qm.classes, "blocks": blocks}
    return tensorfile.pack(MAGIC, header, arrays)


def deserialize_qmodel(blob: bytes) -> QuantModel:
    header, arrays = tensorfile.unpack(MAGIC, blob)
    blocks = []
    for d in header["blocks"]:
        aq = lambda v: None if v is None else ActQuant(np.float32(v[0]), int(v[1]))  # noqa: E731
        blocks.append(QuantBlock(
            name=d["name"], kind=d["kind"], weight=arrays[f"{d['name']}.weight"],
            bias=arrays[f"{d['name']}.bias"], w_scale=np.float32(d["w_scale"]),
            act_in=aq(d["act_in"]), act_out=aq(d["act_out"]), stride=d["stride"], pad=d["pad"],
            pool=None if d["pool"] is None else layer_from_entry(0, {"maxpool": d["pool"]}),
            relu=d["relu"], flatten=d["flatten"], in_dims=tuple(d["in_dims"]),
            conv_out_dims=tuple(d["conv_out_dims"]), out_dims=tuple(d["out_dims"]),
        ))
    return QuantModel(header["name"], tuple(header["input"]), header["classes"], blocks)


def save_qmodel(qm: QuantModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_qmodel(qm))


def load_qmodel(path) -> QuantModel:
    with open(path, "rb") as fh:
        return deserialize_qmodel(fh.read())
