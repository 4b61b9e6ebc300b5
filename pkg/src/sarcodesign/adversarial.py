"""PGD attacks, adversarial training and robustness evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .dataset import Dataset
from .model import ModelGraph, backward, forward
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    """l-inf PGD settings in pixel units (images live in [0, 1])."""

    epsilon: float = 8 / 255
    step: float = 2 / 255
    iters: int = 10
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        # a zero budget disables the attack, so any step is accepted there
        if not (0 <= self.epsilon <= 1 and self.step >= 0 and (self.step <= self.epsilon or self.epsilon == 0)):
            raise ValueError(f"need 0 <= step <= epsilon <= 1, got step={self.step}, epsilon={self.epsilon}")
        if self.iters < 0:
            raise ValueError("iters must be non-negative")


PGD10 = AttackConfig(iters=10)
PGD20 = AttackConfig(iters=20)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    attack: AttackConfig = field(default_factory=lambda: PGD10)
    seed: int = 0


def ball_bounds(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Float32 bounds of the eps-ball around ``x`` that never overshoot it.

    ``x - eps`` and ``x + eps`` are formed in float64 and rounded inward, so any
    value between the bounds satisfies ``|v - x| <= eps`` exactly.
    """
    x64 = x.astype(np.float64)
    lo64, hi64 = x64 - eps, x64 + eps
    lo, hi = lo64.astype(x.dtype), hi64.astype(x.dtype)
    lo = np.where(lo.astype(np.float64) < lo64, np.nextafter(lo, np.inf, dtype=x.dtype), lo)
    hi = np.where(hi.astype(np.float64) > hi64, np.nextafter(hi, -np.inf, dtype=x.dtype), hi)
    return lo, hi


def project(x_adv: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    # eps-ball then pixel box; both are boxes so the composition is the joint projection
    return np.clip(np.clip(x_adv, lo, hi), 0.0, 1.0).astype(x_adv.dtype)


def pgd(x, grad_fn: Callable[[np.ndarray], np.ndarray], cfg: AttackConfig,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Sign-gradient ascent on ``grad_fn`` projected onto the eps-ball and [0, 1]."""
    x = np.asarray(x)
    lo, hi = ball_bounds(x, cfg.epsilon)
    x_adv = x.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        x_adv = project((x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape)).astype(x.dtype), lo, hi)
    for _ in range(cfg.iters if cfg.epsilon > 0 else 0):
        g = grad_fn(x_adv)
        x_adv = project(x_adv + np.asarray(cfg.step, x.dtype) * np.sign(g).astype(x.dtype), lo, hi)
    return x_adv


def input_gradient(graph: ModelGraph, x, y) -> np.ndarray:
    logits, cache = forward(graph, x, "eval")
    _, g = T.softmax_xent(logits, y, reduction="sum")
    return backward(graph, cache, g).input


def pgd_attack(graph: ModelGraph, x, y, cfg: AttackConfig, batch_key: int = 0) -> np.ndarray:
    """Adversarial examples for a batch (``N x C x H x W``) or a single image."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    xb = x[None] if single else x
    yb = np.atleast_1d(y)
    rng = rng_for(cfg.seed, "pgd", batch_key) if cfg.random_start else None
    adv = pgd(xb, lambda z: input_gradient(graph, z, yb), cfg, rng)
    return adv[0] if single else adv


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def eval_clean(graph: ModelGraph, ds: Dataset, batch_size: int = 128) -> float:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    x = ds.x
    hits = 0
    for sl in _batches(len(ds), batch_size):
        hits += int((forward(graph, x[sl])[0].argmax(axis=1) == ds.labels[sl]).sum())
    return hits / len(ds)


def robust_predictions(graph: ModelGraph, ds: Dataset, cfg: AttackConfig, batch_size: int = 128):
    x = ds.x
    preds = []
    for b, sl in enumerate(_batches(len(ds), batch_size)):
        adv = pgd_attack(graph, x[sl], ds.labels[sl], cfg, batch_key=b)
        preds.append(forward(graph, adv)[0].argmax(axis=1))
    return np.concatenate(preds)


def eval_robust(graph: ModelGraph, ds: Dataset, cfg: AttackConfig = PGD20, batch_size: int = 128) -> float:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float((robust_predictions(graph, ds, cfg, batch_size) == ds.labels).sum()) / len(ds)


def mean_loss(graph: ModelGraph, x, y, batch_size: int = 128) -> float:
    total = 0.0
    for sl in _batches(len(y), batch_size):
        total += float(T.softmax_xent(forward(graph, x[sl])[0], y[sl], reduction="sum")[0])
    return total / len(y)


@dataclass
class EpochMetrics:
    epoch: int
    adv_loss: float
    adv_acc: float


def _sgd_step(graph, grads, velocity, cfg: TrainConfig):
    for i, gp in grads.items():
        for k, g in gp.items():
            p = graph.params[i][k]
            if cfg.weight_decay and k == "weight":
                g = g + cfg.weight_decay * p
            v = velocity.setdefault((i, k), np.zeros_like(p))
            v *= cfg.momentum
            v += g
            p -= (cfg.lr * v).astype(p.dtype)


def adv_train(graph: ModelGraph, ds: Dataset, cfg: TrainConfig) -> tuple[ModelGraph, list[EpochMetrics]]:
    """Minimise cross-entropy on PGD examples generated on the fly.

    Examples are crafted against the current weights with batch norm in eval
    mode, then the update runs with batch statistics.  Returns a new graph.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    graph = graph.copy()
    velocity: dict = {}
    history = []
    x_all = ds.x
    for epoch in range(cfg.epochs):
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(len(ds))
        loss_sum = 0.0
        hits = 0
        for b, sl in enumerate(_batches(len(ds), cfg.batch_size)):
            idx = order[sl]
            x, y = x_all[idx], ds.labels[idx]
            attack = replace(cfg.attack, seed=derive_seed(cfg.seed, "attack", epoch))
            x_adv = pgd_attack(graph, x, y, attack, batch_key=b)
            logits, cache = forward(graph, x_adv, "train")
            loss, g = T.softmax_xent(logits, y)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            grads = backward(graph, cache, g)
            _sgd_step(graph, grads.params, velocity, cfg)
            for i, (mean, var) in cache.bn_stats.items():
                graph.params[i]["running_mean"] = mean
                graph.params[i]["running_var"] = var
            loss_sum += float(loss) * len(y)
            hits += int((logits.argmax(axis=1) == y).sum())
        history.append(EpochMetrics(epoch, loss_sum / len(ds), hits / len(ds)))
        log.info("epoch %d adv_loss=%.4f adv_acc=%.3f", epoch, history[-1].adv_loss, history[-1].adv_acc)
    return graph, history
