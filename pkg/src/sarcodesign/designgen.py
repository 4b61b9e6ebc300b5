"""Accelerator design generation: per-layer template parameters, a weight blob
in the engines' fold-major memory layout, template instantiation text and the
candidate manifest."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import astuple, dataclass, fields

import numpy as np

from .accel_sim import fold_weights
from .model import Conv, ModelGraph
from .perf_model import CostReport, PEPolicy, folds, model_cost
from .pruning import pareto_mask
from .quantization import QuantModel

BLOB_MAGIC = b"ARMR"
BLOB_VERSION = 1
# dtype tag -> little-endian numpy dtype
DTYPE_TAGS = {0: np.dtype("<i1"), 1: np.dtype("<i4"), 2: np.dtype("<f4")}
_TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


class BlobError(ValueError):
    pass


@dataclass(frozen=True)
class LayerParams:
    """The ten template parameters of one conv engine instance."""

    name: str
    ih: int
    iw: int
    oh: int
    ow: int
    ic: int
    oc: int
    k: int
    s: int
    p: int
    pe: int

    @property
    def folds(self) -> int:
        return folds(self.oc, self.pe)

    @property
    def last_fold_active(self) -> int:
        """PEs doing useful work in the final fold."""
        return self.oc - (self.folds - 1) * self.pe

    def template_args(self) -> tuple[int, ...]:
        return astuple(self)[1:]


PARAM_NAMES = tuple(f.name.upper() for f in fields(LayerParams))[1:]


def derive_layer_params(model, policy: PEPolicy) -> list[LayerParams]:
    """Template parameters for every conv layer of a quantized model (or a float graph)."""
    out = []
    if isinstance(model, QuantModel):
        for blk in model.blocks:
            if blk.kind != "conv":
                continue
            ic, ih, iw = blk.in_dims
            oc, oh, ow = blk.conv_out_dims
            out.append(LayerParams(blk.name, ih, iw, oh, ow, ic, oc, blk.k, blk.stride, blk.pad, policy.n_pe(oc)))
        return out
    if isinstance(model, ModelGraph):
        for i, (spec, sh) in enumerate(zip(model.layers, model.shapes)):
            if isinstance(spec, Conv):
                ic, ih, iw = sh.in_dims
                oc, oh, ow = sh.out_dims
                out.append(LayerParams(f"conv{i}", ih, iw, oh, ow, ic, oc, spec.k, spec.stride, spec.pad,
                                       policy.n_pe(oc)))
        return out
    raise TypeError(f"expected a QuantModel or ModelGraph, got {type(model).__name__}")


def layer_params_csv(params: list[LayerParams]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("name",) + PARAM_NAMES + ("FOLD", "LAST_FOLD_PE"))
    for lp in params:
        w.writerow((lp.name,) + lp.template_args() + (lp.folds, lp.last_fold_active))
    return buf.getvalue()


# ------------------------------------------------------------------ weight blob


def blob_records(qm: QuantModel, params: list[LayerParams]) -> dict[str, np.ndarray]:
    """Named arrays in blob order.  Conv weights are ``FOLD x PE x IC x K x K``
    and biases ``FOLD x PE``, with idle PEs of the last fold zero-filled."""
    pe_of = {lp.name: lp.pe for lp in params}
    recs: dict[str, np.ndarray] = {}
    for blk in qm.blocks:
        if blk.kind == "conv":
            if blk.name not in pe_of:
                raise BlobError(f"no layer parameters for {blk.name}")
            pe = pe_of[blk.name]
            recs[f"{blk.name}.weight"] = fold_weights(blk.weight, pe)
            recs[f"{blk.name}.bias"] = fold_weights(blk.bias, pe)
        else:
            recs[f"{blk.name}.weight"] = blk.weight
            recs[f"{blk.name}.bias"] = blk.bias
        recs[f"{blk.name}.w_scale"] = np.array([blk.w_scale], np.float32)
        recs[f"{blk.name}.in_scale"] = np.array([blk.act_in.scale], np.float32)
        recs[f"{blk.name}.in_zero_point"] = np.array([blk.act_in.zero_point], np.int32)
        if blk.act_out is not None:
            recs[f"{blk.name}.out_scale"] = np.array([blk.act_out.scale], np.float32)
            recs[f"{blk.name}.out_zero_point"] = np.array([blk.act_out.zero_point], np.int32)
    return recs


def pack_records(records: dict[str, np.ndarray]) -> bytes:
    parts = [BLOB_MAGIC, struct.pack("<II", BLOB_VERSION, len(records))]
    for name, arr in records.items():
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAG_OF:
            raise BlobError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAG_OF[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def export_weight_blob(qm: QuantModel, params: list[LayerParams]) -> bytes:
    return pack_records(blob_records(qm, params))


def import_weight_blob(blob: bytes) -> dict[str, np.ndarray]:
    mv = memoryview(blob)
    if len(blob) < 12 or bytes(mv[:4]) != BLOB_MAGIC:
        raise BlobError("not a weight blob (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != BLOB_VERSION:
        raise BlobError(f"unsupported blob version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = bytes(mv[pos + 4:pos + 4 + n]).decode("utf-8")
            pos += 4 + n
            tag, rank = struct.unpack_from("<BB", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 2)
            pos += 2 + 4 * rank
            dt = DTYPE_TAGS[tag]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(blob):
                raise BlobError(f"record {name!r} runs past the end of the blob")
            out[name] = np.frombuffer(blob, dt, count=size // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += size
    except (struct.error, KeyError) as exc:
        raise BlobError(f"corrupt weight blob: {exc}") from None
    if pos != len(blob):
        raise BlobError(f"{len(blob) - pos} trailing bytes after the last record")
    return out


# ---------------------------------------------------------------- text outputs


def emit_template_text(params: list[LayerParams]) -> str:
    lines = [f"// cnn_layer<{', '.join(PARAM_NAMES)}>"]
    for lp in params:
        args = ", ".join(str(v) for v in lp.template_args())
        lines.append(f"cnn_layer<{args}>({lp.name}_in, {lp.name}_out, {lp.name}_W, {lp.name}_B);"
                     f"  // FOLD={lp.folds} last fold {lp.last_fold_active}/{lp.pe} PEs active")
    return "\n".join(lines) + "\n"


MANIFEST_COLUMNS = ("candidate_id", "step", "clean_acc", "robustness", "macs", "cycles", "dsp", "bram", "pareto")


def emit_candidate_manifest(cset, reports: list[CostReport] | None = None) -> str:
    """One row per candidate, Pareto flag against (robustness, cost)."""
    cands = list(cset)
    if reports is None:
        reports = [c.report or model_cost(c.graph, cset.config.policy, cset.config.hw) for c in cands]
    if len(reports) != len(cands):
        raise ValueError("need one cost report per candidate")
    flags = pareto_mask([(c.robustness, c.cost) for c in cands])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for k, (c, rep, flag) in enumerate(zip(cands, reports, flags)):
        w.writerow([k, c.step, c.clean_acc, c.robustness, rep.macs, rep.cycles, rep.dsp, rep.bram, int(flag)])
    return buf.getvalue()
