"""Stage-accurate simulator of the conv / max-pool / GEMM engines.

Each engine walks the same loop nest the hardware runs (folds, output rows,
output pixels, line-buffer updates) and charges cycles from loop trip counts,
initiation intervals and pipeline depths while it computes the INT8 result.
Register-level timing is not modelled.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .perf_model import DEFAULT_CONSTANTS, HwConstants, PEPolicy
from .quantization import QuantBlock, QuantModel, quantize_activation, requantize

NEG_INF = np.iinfo(np.int64).min


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    """Template parameters of one engine invocation (CCE fields follow the template parameter order)."""

    kind: str  # "CCE", "MCE" or "GCE"
    ih: int
    iw: int
    oh: int
    ow: int
    ic: int
    oc: int
    k: int
    s: int
    p: int
    n_pe: int
    is_first_layer: bool = False
    zp_in: int = 0
    # requantization applied by this engine; None leaves int32 partial sums
    multiplier: float | None = None
    zp_out: int = 0
    relu: bool = False

    @property
    def folds(self) -> int:
        return -(-self.oc // self.n_pe)

    @property
    def last_fold_active(self) -> int:
        return self.oc - (self.folds - 1) * self.n_pe


@dataclass
class EngineReport:
    name: str
    kind: str
    n_pe: int
    folds: int
    input_load: int = 0
    compute: int = 0
    buffer_update: int = 0
    drain: int = 0
    fold_trace: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.input_load + self.compute + self.buffer_update + self.drain


# ------------------------------------------------------------- layout helpers


def fold_weights(w: np.ndarray, n_pe: int) -> np.ndarray:
    """``O x ...`` -> ``FOLD x PE x ...`` with zero rows for idle PEs of the last fold."""
    oc = w.shape[0]
    nf = -(-oc // n_pe)
    out = np.zeros((nf * n_pe,) + w.shape[1:], dtype=w.dtype)
    out[:oc] = w
    return out.reshape((nf, n_pe) + w.shape[1:])


def repack(stream: np.ndarray, oc: int) -> np.ndarray:
    """Fold-ordered ``FOLD x OH x OW x PE`` stream -> channel-contiguous ``OC x OH x OW``."""
    nf, oh, ow, pe = stream.shape
    return stream.transpose(0, 3, 1, 2).reshape(nf * pe, oh, ow)[:oc]


def unpack(fmap: np.ndarray, n_pe: int) -> np.ndarray:
    """Inverse of :func:`repack`; idle lanes of the last fold are zero."""
    return fold_weights(fmap, n_pe).transpose(0, 2, 3, 1)


# ------------------------------------------------------------------------ CCE


def simulate_cce(cfg: EngineConfig, q_in, wbuf, bbuf, hw: HwConstants = DEFAULT_CONSTANTS,
                 functional: bool = True, name: str = "cce"):
    """Run the conv engine.

    ``q_in`` is the ``IC x IH x IW`` int8 map, ``wbuf``/``bbuf`` the fold-major
    weights and biases.  Returns ``(out, report)`` where ``out`` is
    ``OC x OH x OW``: int8 when ``cfg.multiplier`` is set, int64 accumulators
    otherwise.  ``functional=False`` only walks the schedule.
    """
    k, s, p = cfg.k, cfg.s, cfg.p
    if functional:
        q_in = np.asarray(q_in)
        if q_in.shape != (cfg.ic, cfg.ih, cfg.iw):
            raise SimError(f"input map {q_in.shape} does not match IC x IH x IW = {(cfg.ic, cfg.ih, cfg.iw)}")
        if wbuf.shape != (cfg.folds, cfg.n_pe, cfg.ic, k, k):
            raise SimError(f"weight buffer {wbuf.shape} does not match FOLD x PE x IC x K x K")
        if bbuf.shape != (cfg.folds, cfg.n_pe):
            raise SimError(f"bias buffer {bbuf.shape} does not match FOLD x PE")
        # padding is the input zero-point, i.e. exact zeros once centred
        padded = np.zeros((cfg.ic, cfg.ih + 2 * p, cfg.iw + 2 * p), np.int64)
        padded[:, p:p + cfg.ih, p:p + cfg.iw] = q_in.astype(np.int64) - cfg.zp_in
        w64 = wbuf.astype(np.int64)
        stream = np.zeros((cfg.folds, cfg.oh, cfg.ow, cfg.n_pe), np.int64)
    if (cfg.oh - 1) * s + k > cfg.ih + 2 * p or (cfg.ow - 1) * s + k > cfg.iw + 2 * p:
        raise SimError("output dims inconsistent with input dims, kernel, stride and padding")

    rep = EngineReport(name, "CCE", cfg.n_pe, cfg.folds)
    rep.input_load = k * (1 if cfg.is_first_layer else cfg.iw) * hw.ii_input + hw.d_input
    t_pixel = cfg.ic * hw.ii_conv + hw.d_conv + hw.t_ov
    t_update = s * cfg.iw * hw.ii_b + hw.d_b
    for f in range(cfg.folds):
        compute = update = 0
        if functional:
            # K-row circular line buffer: padded row r always lives in slot r % K
            linebuf = np.zeros((cfg.ic, k, cfg.iw + 2 * p), np.int64)
            for r in range(k):
                linebuf[:, r % k] = padded[:, r]
            bias = bbuf[f].astype(np.int64)
            wf = w64[f]
        for oh in range(cfg.oh):
            if functional:
                head = (oh * s) % k
                rows = linebuf[:, [(head + kh) % k for kh in range(k)]]  # IC x K x W
            for ow in range(cfg.ow):
                if functional:
                    window = rows[:, :, ow * s:ow * s + k]
                    stream[f, oh, ow] = bias + np.tensordot(wf, window, axes=([1, 2, 3], [0, 1, 2]))
                compute += t_pixel
            if oh < cfg.oh - 1:
                if functional:
                    for j in range(s):
                        r = oh * s + k + j
                        linebuf[:, r % k] = padded[:, r]
                update += t_update
        rep.compute += compute
        rep.buffer_update += update
        rep.fold_trace.append({"fold": f, "active_pe": min(cfg.n_pe, cfg.oc - f * cfg.n_pe),
                               "compute": compute, "buffer_update": update})
    if not functional:
        return None, rep
    out = repack(stream, cfg.oc)
    if cfg.multiplier is not None:
        out = requantize(out, cfg.multiplier, cfg.zp_out, cfg.relu)
    return out, rep


# ------------------------------------------------------------------------ MCE


def simulate_mce(cfg: EngineConfig, acc_in, hw: HwConstants = DEFAULT_CONSTANTS,
                 functional: bool = True, name: str = "mce"):
    """Max-pool engine over ``C x IH x IW`` accumulators with inline requantization.

    ``cfg.oc`` is the channel count and ``cfg.k``/``cfg.s``/``cfg.p`` the pool
    window, stride and padding.  The engine scans ``IH + 2P`` rows by
    ``OW + 2P`` column slots per fold; slots past ``OW`` are idle.
    """
    k, s, p, c = cfg.k, cfg.s, cfg.p, cfg.oc
    rep = EngineReport(name, "MCE", cfg.n_pe, cfg.folds)
    if functional:
        acc_in = np.asarray(acc_in)
        if acc_in.shape != (c, cfg.ih, cfg.iw):
            raise SimError(f"pool input {acc_in.shape} does not match C x IH x IW = {(c, cfg.ih, cfg.iw)}")
        lanes = unpack(acc_in.astype(np.int64), cfg.n_pe)  # FOLD x IH x IW x PE
        padded = np.full((cfg.folds, cfg.ih + 2 * p, cfg.iw + 2 * p, cfg.n_pe), NEG_INF, np.int64)
        padded[:, p:p + cfg.ih, p:p + cfg.iw] = lanes
        result = np.zeros((cfg.folds, cfg.oh, cfg.ow, cfg.n_pe), np.int64)
    for f in range(cfg.folds):
        cycles = 0
        if functional:
            vert = np.full((cfg.oh, cfg.ow, cfg.n_pe), NEG_INF, np.int64)
        for h in range(cfg.ih + 2 * p):
            for ow in range(cfg.ow + 2 * p):
                if functional and ow < cfg.ow:
                    # horizontal comparator stage, then fold into every window this row belongs to
                    hmax = padded[f, h, ow * s:ow * s + k].max(axis=0)
                    for oh in range(max(0, -(-(h - k + 1) // s)), min(cfg.oh - 1, h // s) + 1):
                        np.maximum(vert[oh, ow], hmax, out=vert[oh, ow])
                cycles += hw.ii_maxpool
            if functional:
                done = h - k + 1
                if done >= 0 and done % s == 0 and done // s < cfg.oh:
                    result[f, done // s] = vert[done // s]
        rep.compute += cycles
        rep.fold_trace.append({"fold": f, "active_pe": min(cfg.n_pe, c - f * cfg.n_pe), "compute": cycles})
    rep.drain = hw.d_maxpool
    if not functional:
        return None, rep
    out = repack(result, c)
    if cfg.multiplier is not None:
        out = requantize(out, cfg.multiplier, cfg.zp_out, cfg.relu)
    return out, rep


# ------------------------------------------------------------------------ GCE


@dataclass(frozen=True)
class GemmConfig:
    in_features: int
    out_features: int
    array_rows: int = 1
    array_cols: int = 16
    zp_in: int = 0
    multiplier: float | None = None
    zp_out: int = 0
    relu: bool = False


def simulate_gce(cfg: GemmConfig, q_in, weight, bias, name: str = "gce"):
    """Weight-stationary systolic GEMM for a single input vector.

    Cycle model (not part of the analytical CCE/MCE model): each tile of
    ``array_cols`` outputs streams the ``in_features`` inner dimension at one
    element per cycle, plus a single ``array_rows + array_cols - 1`` fill.
    """
    q_in = np.asarray(q_in).reshape(-1)
    if q_in.size != cfg.in_features or weight.shape != (cfg.out_features, cfg.in_features):
        raise SimError(f"GEMM operands {q_in.shape} x {weight.shape} do not match the config")
    x = q_in.astype(np.int64) - cfg.zp_in
    w = weight.astype(np.int64)
    acc = bias.astype(np.int64).copy()
    tiles = -(-cfg.out_features // cfg.array_cols)
    rep = EngineReport(name, "GCE", cfg.array_cols, tiles)
    for t in range(tiles):
        cols = slice(t * cfg.array_cols, min((t + 1) * cfg.array_cols, cfg.out_features))
        psum = np.zeros(cols.stop - cols.start, np.int64)
        for i in range(cfg.in_features):  # one inner-product step per cycle
            psum += x[i] * w[cols, i]
        acc[cols] += psum
        rep.compute += cfg.in_features
    rep.drain = cfg.array_rows + cfg.array_cols - 1
    if cfg.multiplier is not None:
        return requantize(acc, cfg.multiplier, cfg.zp_out, cfg.relu), rep
    return acc, rep


# ----------------------------------------------------------------- full model


@dataclass
class SimReport:
    mode: str
    engines: list[EngineReport]
    outputs: list  # integer feature map after every block
    logits: np.ndarray | None = None

    @property
    def conv_pool_engines(self) -> list[EngineReport]:
        return [e for e in self.engines if e.kind in ("CCE", "MCE")]

    @property
    def stage_sum_cycles(self) -> int:
        """CCE + MCE cycles summed over stages (single-image, fill-dominated bound)."""
        return sum(e.total for e in self.conv_pool_engines)

    @property
    def stage_max_cycles(self) -> int:
        """Slowest CCE/MCE stage (streaming throughput bound)."""
        return max((e.total for e in self.conv_pool_engines), default=0)

    @property
    def gce_cycles(self) -> int:
        return sum(e.total for e in self.engines if e.kind == "GCE")

    @property
    def latency_cycles(self) -> int:
        # temporal: layer invocations run back to back; streaming: reported as the sum bound
        return self.stage_sum_cycles

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["engine", "kind", "pe", "folds", "input_load", "compute", "buffer_update", "drain", "total"])
        for e in self.engines:
            w.writerow([e.name, e.kind, e.n_pe, e.folds, e.input_load, e.compute, e.buffer_update, e.drain, e.total])
        return buf.getvalue()

    def table(self, trace: bool = False) -> str:
        rows = [f"{'engine':<10}{'kind':>5}{'PE':>4}{'folds':>6}{'load':>7}{'compute':>9}{'update':>8}"
                f"{'drain':>6}{'total':>9}"]
        for e in self.engines:
            rows.append(f"{e.name:<10}{e.kind:>5}{e.n_pe:>4}{e.folds:>6}{e.input_load:>7}{e.compute:>9}"
                        f"{e.buffer_update:>8}{e.drain:>6}{e.total:>9}")
            if trace:
                rows.extend(f"    {t}" for t in e.fold_trace)
        rows.append(f"mode={self.mode} stage_sum={self.stage_sum_cycles} stage_max={self.stage_max_cycles} "
                    f"gce(modelled separately)={self.gce_cycles}")
        return "\n".join(rows)


def cce_config(blk: QuantBlock, n_pe: int, is_first: bool) -> EngineConfig:
    ic, ih, iw = blk.in_dims
    oc, oh, ow = blk.conv_out_dims
    requant = blk.pool is None and blk.act_out is not None
    return EngineConfig("CCE", ih, iw, oh, ow, ic, oc, blk.k, blk.stride, blk.pad, n_pe, is_first,
                        zp_in=blk.act_in.zero_point,
                        multiplier=blk.multiplier if requant else None,
                        zp_out=blk.act_out.zero_point if requant else 0,
                        relu=blk.relu and requant)


def mce_config(blk: QuantBlock, n_pe: int) -> EngineConfig:
    c, ih, iw = blk.conv_out_dims
    _, oh, ow = blk.out_dims if len(blk.out_dims) == 3 else _pool_dims(blk)
    requant = blk.act_out is not None
    return EngineConfig("MCE", ih, iw, oh, ow, c, c, blk.pool.k, blk.pool.step, blk.pool.pad, n_pe,
                        multiplier=blk.multiplier if requant else None,
                        zp_out=blk.act_out.zero_point if requant else 0, relu=blk.relu)


def _pool_dims(blk: QuantBlock):
    c, h, w = blk.conv_out_dims
    k, s, p = blk.pool.k, blk.pool.step, blk.pool.pad
    return c, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def simulate_model(qm: QuantModel, image, mode: str = "streaming", policy: PEPolicy | None = None,
                   hw: HwConstants = DEFAULT_CONSTANTS, gemm_cols: int = 16):
    """Run one image through the engine chain; returns ``(logits, SimReport)``."""
    policy = policy or PEPolicy(mode)
    if policy.mode != mode:
        policy = PEPolicy(mode, policy.pe_max)
    x = np.asarray(image, dtype=np.float32)
    if x.shape != tuple(qm.input_dims):
        raise SimError(f"image shape {x.shape} != model input {tuple(qm.input_dims)}")
    q = quantize_activation(x, qm.act_in)
    engines, outputs = [], []
    logits = None
    first_conv = True
    for blk in qm.blocks:
        if blk.kind == "conv":
            n_pe = policy.n_pe(blk.weight.shape[0])
            cfg = cce_config(blk, n_pe, first_conv)
            first_conv = False
            out, rep = simulate_cce(cfg, q, fold_weights(blk.weight, n_pe), fold_weights(blk.bias, n_pe), hw,
                                    name=f"{blk.name}")
            engines.append(rep)
            if blk.pool is not None:
                out, rep = simulate_mce(mce_config(blk, n_pe), out, hw, name=f"{blk.name}.pool")
                engines.append(rep)
            if blk.act_out is None:
                raise SimError("a conv block cannot be the classifier")
            q = out
        else:
            cols = min(gemm_cols, blk.weight.shape[0])
            last = blk.act_out is None
            gcfg = GemmConfig(blk.weight.shape[1], blk.weight.shape[0], 1, cols, blk.act_in.zero_point,
                              None if last else blk.multiplier, 0 if last else blk.act_out.zero_point,
                              blk.relu)
            out, rep = simulate_gce(gcfg, q, blk.weight, blk.bias, name=blk.name)
            engines.append(rep)
            if last:
                logits = out.astype(np.float64) * blk.acc_scale
                break
            q = out
        if blk.flatten:
            q = q.reshape(-1)
        outputs.append(q)
    return logits, SimReport(mode, engines, outputs, logits)
