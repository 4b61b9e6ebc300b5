"""Robustness-aware, hardware-guided structured channel pruning.

Each step scores every prunable channel with ``gain / (saliency + eps)``,
removes the best one, re-measures PGD robustness and hardware cost, and keeps
a snapshot whenever the cost has dropped by the checkpoint factor since the
last snapshot.  Pruning stops once robustness falls more than ``tau`` (relative)
below the unpruned model.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .adversarial import PGD20, AttackConfig, TrainConfig, adv_train, eval_clean, eval_robust
from .dataset import Dataset
from .model import BatchNorm, ChannelId, ModelGraph, ReLU, backward, forward, prune_channel, save_model
from .perf_model import DEFAULT_CONSTANTS, OBJECTIVES, CostReport, HwConstants, PEPolicy, layer_gain, model_cost
from .seeding import rng_for

log = logging.getLogger(__name__)

SALIENCY_KINDS = ("l1", "l2", "actmean", "taylor", "random")


@dataclass(frozen=True)
class PruneConfig:
    objective: str = "latency"
    saliency: str = "taylor"
    tau: float = 0.05
    rho: float = 0.8
    stability: float = 1e-8
    attack: AttackConfig = PGD20
    saliency_batch: int = 64
    eval_size: int = 128
    seed: int = 0
    policy: PEPolicy = field(default_factory=PEPolicy)
    hw: HwConstants = DEFAULT_CONSTANTS
    # False ranks channels by 1 / (S + eps) alone (the saliency-only baseline)
    hardware_guided: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.saliency not in SALIENCY_KINDS:
            raise ValueError(f"saliency must be one of {SALIENCY_KINDS}")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if not self.stability > 0:
            raise ValueError("stability constant must be positive")


@dataclass
class Candidate:
    graph: ModelGraph
    robustness: float
    clean_acc: float
    cost: float
    step: int
    removed: tuple[ChannelId, ...] = ()
    report: CostReport | None = None
    ft_robustness: float | None = None
    ft_clean_acc: float | None = None


@dataclass(frozen=True)
class StepRecord:
    step: int
    channel: ChannelId
    gain: float
    saliency: float
    priority: float
    robustness: float
    clean_acc: float
    cost: float
    saved: bool
    stopped: bool


@dataclass
class CandidateSet:
    candidates: list[Candidate]
    trajectory: list[StepRecord]
    config: PruneConfig
    base_robustness: float
    base_cost: float
    eval_indices: np.ndarray

    def __iter__(self):
        return iter(self.candidates)

    def __len__(self):
        return len(self.candidates)


# -------------------------------------------------------------------- saliency


def weight_norm_saliency(weight, p: int) -> np.ndarray:
    """Per-output-channel l_p norm of a weight tensor (bias excluded)."""
    w = np.asarray(weight, np.float64).reshape(len(weight), -1)
    return np.abs(w).sum(axis=1) if p == 1 else np.sqrt((w * w).sum(axis=1))


def activation_mean_saliency(z) -> np.ndarray:
    """Batch mean of each channel's mean absolute activation; ``z`` is ``N x C [x H x W]``."""
    z = np.abs(np.asarray(z, np.float64))
    return z.reshape(z.shape[0], z.shape[1], -1).mean(axis=2).mean(axis=0)


def taylor_saliency(dz, z) -> np.ndarray:
    """``|E_batch[sum_positions dL/dz * z]|`` per channel."""
    prod = np.asarray(dz, np.float64) * np.asarray(z, np.float64)
    return np.abs(prod.reshape(prod.shape[0], prod.shape[1], -1).sum(axis=2).mean(axis=0))


def channel_output_index(graph: ModelGraph, layer: int) -> int:
    """Index of the activation that carries ``layer``'s channels: the layer's
    output after any directly following batch norm / ReLU.  Zeroing it is
    equivalent to removing the channel."""
    j = layer
    while j + 1 < len(graph.layers) and isinstance(graph.layers[j + 1], (BatchNorm, ReLU)):
        j += 1
    return j


def saliency_scores(graph: ModelGraph, x, y, kind: str, rng: np.random.Generator | None = None
                    ) -> dict[ChannelId, float]:
    layers = graph.prunable_layers()
    scores: dict[ChannelId, float] = {}
    if kind in ("l1", "l2"):
        for l in layers:
            s = weight_norm_saliency(graph.params[l]["weight"], 1 if kind == "l1" else 2)
            scores.update({ChannelId(l, c): float(v) for c, v in enumerate(s)})
        return scores
    if kind == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        for l in layers:
            scores.update({ChannelId(l, c): float(v) for c, v in enumerate(rng.uniform(size=graph.channels(l)))})
        return scores
    if kind not in ("actmean", "taylor"):
        raise ValueError(f"unknown saliency kind {kind!r}")
    if len(x) == 0:
        raise ValueError("activation-based saliency needs a non-empty batch")
    logits, cache = forward(graph, x)
    grads = None
    if kind == "taylor":
        _, g = T.softmax_xent(logits, y, reduction="sum")  # row i = d loss_i / d logits_i
        grads = backward(graph, cache, g, keep_outputs=True).outputs
    for l in layers:
        j = channel_output_index(graph, l)
        z = cache.outputs[j]
        s = activation_mean_saliency(z) if kind == "actmean" else taylor_saliency(grads[j], z)
        scores.update({ChannelId(l, c): float(v) for c, v in enumerate(s)})
    return scores


def priority_scores(gains: dict, saliencies: dict, eps: float = 1e-8) -> dict[ChannelId, float]:
    return {cid: gains[cid] / (saliencies[cid] + eps) for cid in gains}


def select_channel(priorities: dict) -> ChannelId:
    """Highest priority; ties go to the lower layer, then the lower channel."""
    best = None
    for cid in sorted(priorities):
        if best is None or priorities[cid] > priorities[best]:
            best = cid
    if best is None:
        raise ValueError("no channels to choose from")
    return best


# ------------------------------------------------------------------ main loop


def eval_subset(ds: Dataset, size: int, seed: int) -> np.ndarray:
    idx = rng_for(seed, "eval-subset").permutation(len(ds))[:size]
    return np.sort(idx)


def saliency_batch(ds: Dataset, size: int, seed: int, step: int) -> np.ndarray:
    n = min(size, len(ds))
    return np.sort(rng_for(seed, "saliency-batch", step).choice(len(ds), size=n, replace=False))


def step_scores(graph: ModelGraph, ds: Dataset, cfg: PruneConfig, step: int):
    """Gains, saliencies and priorities for every prunable channel at ``step``."""
    idx = saliency_batch(ds, cfg.saliency_batch, cfg.seed, step)
    sal = saliency_scores(graph, ds.x[idx], ds.labels[idx], cfg.saliency, rng_for(cfg.seed, "random-saliency", step))
    cids = graph.prunable_channels()
    layer_g = {l: layer_gain(graph, l, cfg.objective, cfg.policy, cfg.hw) for l in {c.layer for c in cids}}
    gains = {c: float(layer_g[c.layer]) for c in cids}
    sal = {c: sal[c] for c in cids}
    if cfg.hardware_guided:
        pri = priority_scores(gains, sal, cfg.stability)
    else:
        pri = priority_scores({c: 1.0 for c in cids}, sal, cfg.stability)
    return gains, sal, pri


def run_pruning(graph: ModelGraph, ds: Dataset, cfg: PruneConfig, eval_ds: Dataset | None = None) -> CandidateSet:
    """Prune ``graph``.  Saliency batches come from ``ds``; robustness is measured
    on a fixed subset of ``eval_ds`` (default: ``ds``)."""
    graph.check_params()
    eval_ds = ds if eval_ds is None else eval_ds
    if len(ds) == 0 or len(eval_ds) == 0:
        raise ValueError("pruning needs non-empty saliency and evaluation sets")
    eval_idx = eval_subset(eval_ds, cfg.eval_size, cfg.seed)
    eval_ds = eval_ds.subset(eval_idx)

    def measure(g):
        rep = model_cost(g, cfg.policy, cfg.hw)
        return eval_robust(g, eval_ds, cfg.attack), eval_clean(g, eval_ds), rep

    r_base, c_base, rep = measure(graph)
    o_base = rep.objective(cfg.objective)
    o_next = cfg.rho * o_base
    cands = [Candidate(graph, r_base, c_base, o_base, 0, (), rep)]
    traj: list[StepRecord] = []
    removed: list[ChannelId] = []
    step = 0
    log.info("baseline robustness=%.4f %s=%s", r_base, cfg.objective, o_base)
    while cfg.max_steps is None or step < cfg.max_steps:
        if not graph.prunable_channels():
            break
        gains, sal, pri = step_scores(graph, ds, cfg, step)
        cid = select_channel(pri)
        graph = prune_channel(graph, cid)
        removed.append(cid)
        step += 1
        r_cur, c_cur, rep = measure(graph)
        o_cur = rep.objective(cfg.objective)
        stop = r_base - r_cur > cfg.tau * r_base
        saved = not stop and o_cur <= o_next
        traj.append(StepRecord(step, cid, gains[cid], sal[cid], pri[cid], r_cur, c_cur, o_cur, saved, stop))
        log.info("step %d pruned %s robustness=%.4f %s=%s%s", step, tuple(cid), r_cur, cfg.objective, o_cur,
                 " (saved)" if saved else "")
        if stop:
            break
        if saved:
            cands.append(Candidate(graph, r_cur, c_cur, o_cur, step, tuple(removed), rep))
            o_next = cfg.rho * o_cur
    return CandidateSet(cands, traj, cfg, r_base, o_base, eval_idx)


def fine_tune(cand: Candidate, ds: Dataset, base: TrainConfig, epochs: int = 10,
              eval_ds: Dataset | None = None, attack: AttackConfig = PGD20) -> Candidate:
    """A few epochs of the same adversarial training at a tenth of the learning rate."""
    cfg = replace(base, epochs=epochs, lr=base.lr / 10)
    graph, _ = adv_train(cand.graph, ds, cfg)
    out = replace(cand, graph=graph)
    if eval_ds is not None:
        out.ft_clean_acc = eval_clean(graph, eval_ds)
        out.ft_robustness = eval_robust(graph, eval_ds, attack)
    return out


# ---------------------------------------------------------------------- pareto


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """``(robustness, cost)`` pairs: higher robustness and lower cost are better."""
    return a[0] >= b[0] and a[1] <= b[1] and (a[0] > b[0] or a[1] < b[1])


def pareto_mask(points) -> list[bool]:
    pts = [tuple(p) for p in points]
    # sweep by ascending cost, ties by descending robustness; a point survives
    # only if it beats the best robustness seen at strictly lower cost
    order = sorted(range(len(pts)), key=lambda i: (pts[i][1], -pts[i][0]))
    keep = [False] * len(pts)
    best = -np.inf
    n = 0
    while n < len(order):
        cost = pts[order[n]][1]
        group = []
        while n < len(order) and pts[order[n]][1] == cost:
            group.append(order[n])
            n += 1
        top = pts[group[0]][0]
        for i in group:
            keep[i] = pts[i][0] == top and top > best
        best = max(best, top)
    return keep


def pareto_filter(cands):
    """Candidates (or ``(robustness, cost)`` pairs) that no other one dominates."""
    cands = list(cands)
    pts = [(c.robustness, c.cost) if isinstance(c, Candidate) else c for c in cands]
    return [c for c, k in zip(cands, pareto_mask(pts)) if k]


# --------------------------------------------------------------------- output


def candidate_rows(cset: CandidateSet) -> list[dict]:
    flags = pareto_mask([(c.robustness, c.cost) for c in cset.candidates])
    rows = []
    for c, flag in zip(cset.candidates, flags):
        rep = c.report or model_cost(c.graph, cset.config.policy, cset.config.hw)
        rows.append({
            "step": c.step,
            "channels_removed": len(c.removed),
            "clean_acc": c.clean_acc,
            "robustness": c.robustness,
            "macs": rep.macs,
            "est_cycles": rep.cycles,
            "est_dsp": rep.dsp,
            "est_bram": rep.bram,
            "pareto_flag": int(flag),
        })
    return rows


def manifest_csv(cset: CandidateSet) -> str:
    buf = io.StringIO()
    rows = candidate_rows(cset)
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def trajectory_csv(cset: CandidateSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "layer", "channel", "gain", "saliency", "priority", "robustness", "clean_acc",
                "cost", "saved", "stopped"])
    w.writerow([0, "", "", "", "", "", cset.base_robustness, cset.candidates[0].clean_acc, cset.base_cost, 1, 0])
    for r in cset.trajectory:
        w.writerow([r.step, r.channel.layer, r.channel.channel, r.gain, repr(r.saliency), repr(r.priority),
                    r.robustness, r.clean_acc, r.cost, int(r.saved), int(r.stopped)])
    return buf.getvalue()


def write_candidates(cset: CandidateSet, out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k, c in enumerate(cset.candidates):
        path = os.path.join(out_dir, f"candidate_{k:03d}.model")
        save_model(c.graph, path)
        paths.append(path)
    with open(os.path.join(out_dir, "candidates.csv"), "w") as fh:
        fh.write(manifest_csv(cset))
    with open(os.path.join(out_dir, "trajectory.csv"), "w") as fh:
        fh.write(trajectory_csv(cset))
    return paths


# ------------------------------------------------------------------- ablations


def curve(cset: CandidateSet) -> list[tuple[float, float]]:
    """``(cost, robustness)`` after every step, starting with the unpruned model."""
    return [(cset.base_cost, cset.base_robustness)] + [(r.cost, r.robustness) for r in cset.trajectory]


def robustness_at(points: list[tuple[float, float]], level: float) -> float | None:
    """Robustness of the first model on a curve whose cost is at or below ``level``."""
    for cost, rob in points:
        if cost <= level:
            return rob
    return None


def checkpoint_levels(base: float, floor: float, rho: float = 0.8) -> list[float]:
    """Geometric cost levels ``base * rho**k`` (k >= 1) down to ``floor``."""
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    levels = []
    level = base * rho
    while level >= floor and level > 0:
        levels.append(level)
        level *= rho
    return levels


def compare_at_checkpoints(a, b, rho: float = 0.8) -> list[tuple[float, float, float]]:
    """``(level, robustness_a, robustness_b)`` at every geometric checkpoint
    both curves reach.  Both curves must start from the same unpruned cost."""
    if a[0][0] != b[0][0]:
        raise ValueError("curves start from different baseline costs")
    floor = max(min(c for c, _ in a), min(c for c, _ in b))
    return [(lv, robustness_at(a, lv), robustness_at(b, lv)) for lv in checkpoint_levels(a[0][0], floor, rho)]
