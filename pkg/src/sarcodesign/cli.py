"""Command-line entry point.

Every flag may also come from a YAML ``--config`` file (keys are flag names
with dashes or underscores); flags given on the command line win.  Exit codes:
0 on success, 2 for invalid input or configuration, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from fractions import Fraction

import numpy as np
import yaml

from . import dataset as D
from .accel_sim import simulate_model
from .adversarial import AttackConfig, TrainConfig, adv_train, eval_clean, eval_robust
from .designgen import (derive_layer_params, emit_candidate_manifest, emit_template_text, export_weight_blob,
                        layer_params_csv)
from .model import load_model, model_from_description, predict, save_model
from .perf_model import (DEFAULT_CONSTANTS, OBJECTIVES, PE_MAX_CHOICES, ConvDims, HwConstants, PEPolicy, PoolDims,
                         conv_latency, maxpool_latency, model_cost)
from .pruning import (SALIENCY_KINDS, Candidate, PruneConfig, compare_at_checkpoints, curve, fine_tune, run_pruning,
                      write_candidates)
from .quantization import QuantizationError, fuse_model, load_qmodel, quant_infer, quantize_model, save_qmodel
from .seeding import derive_seed

log = logging.getLogger("sarcodesign")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    pass


def fraction(text) -> float:
    """``"8/255"`` or ``"0.03"`` -> float."""
    try:
        return float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}") from None


def attack_from(name: str, eps: float, step: float, seed: int) -> AttackConfig:
    name = name.lower()
    if name == "none":
        return AttackConfig(epsilon=0.0, step=0.0, iters=0, seed=seed)
    if not name.startswith("pgd") or not name[3:].isdigit():
        raise UsageError(f"attack must be 'none' or 'pgdN', got {name!r}")
    return AttackConfig(epsilon=eps, step=step, iters=int(name[3:]), seed=seed)


# ----------------------------------------------------------------- subcommands


def cmd_dataset_gen(a):
    need(a, "out")
    ds = D.generate_synthetic(a.classes, a.per_class, a.side, seed=a.seed, split=a.split)
    D.save(ds, a.out)
    print(f"wrote {len(ds)} samples ({a.classes} classes, {a.side}x{a.side}) to {a.out}")


def cmd_train(a):
    need(a, "model", "data", "out")
    with open(a.model) as fh:
        graph = model_from_description(fh.read(), seed=derive_seed(a.seed, "init"))
    ds = D.load(a.data)
    cfg = TrainConfig(epochs=a.epochs, batch_size=a.batch_size, lr=a.lr, momentum=a.momentum,
                      attack=AttackConfig(epsilon=a.eps, step=a.step, iters=a.pgd_steps),
                      seed=derive_seed(a.seed, "train"))
    graph, history = adv_train(graph, ds, cfg)
    save_model(graph, a.out)
    for h in history:
        print(f"epoch {h.epoch:3d}  adv_loss {h.adv_loss:.4f}  adv_acc {h.adv_acc:.4f}")
    print(f"wrote {a.out}")


def cmd_eval(a):
    need(a, "model", "data")
    graph = load_model(a.model)
    ds = D.load(a.data)
    clean = eval_clean(graph, ds)
    robust = eval_robust(graph, ds, attack_from(a.attack, a.eps, a.step, derive_seed(a.seed, "eval")))
    print(f"clean_acc {clean:.6f}")
    print(f"robust_acc {robust:.6f}  ({a.attack}, eps={a.eps:.6g})")


def _prune_config(a, objective, saliency, guided=True, tau=None) -> PruneConfig:
    return PruneConfig(objective=objective, saliency=saliency, tau=a.tau if tau is None else tau, rho=a.rho,
                       attack=AttackConfig(epsilon=a.eps, step=a.step, iters=20, seed=derive_seed(a.seed, "attack")),
                       saliency_batch=a.saliency_batch, eval_size=a.eval_size, seed=derive_seed(a.seed, "prune"),
                       policy=PEPolicy(a.mode, a.pe_max), hw=a.hw, hardware_guided=guided)


def cmd_prune(a):
    need(a, "model", "data", "out")
    graph = load_model(a.model)
    ds = D.load(a.data)
    eval_ds = D.load(a.eval_data) if a.eval_data else None
    cset = run_pruning(graph, ds, _prune_config(a, a.objective, a.saliency), eval_ds)
    write_candidates(cset, a.out)
    with open(os.path.join(a.out, "manifest.csv"), "w") as fh:
        fh.write(emit_candidate_manifest(cset))
    print(f"{len(cset.trajectory)} channels pruned, {len(cset)} candidates written to {a.out}")
    for k, c in enumerate(cset):
        print(f"  candidate {k}: step {c.step:3d}  robustness {c.robustness:.4f}  clean {c.clean_acc:.4f}"
              f"  {a.objective} {c.cost:g}")


def cmd_finetune(a):
    need(a, "candidate", "data")
    graph = load_model(a.candidate)
    ds = D.load(a.data)
    base = TrainConfig(lr=a.lr, batch_size=a.batch_size, momentum=a.momentum,
                       attack=AttackConfig(epsilon=a.eps, step=a.step, iters=a.pgd_steps),
                       seed=derive_seed(a.seed, "finetune"))
    eval_ds = D.load(a.eval_data) if a.eval_data else None
    attack = AttackConfig(epsilon=a.eps, step=a.step, iters=20, seed=derive_seed(a.seed, "attack"))
    cand = fine_tune(Candidate(graph, float("nan"), float("nan"), 0.0, 0), ds, base, a.epochs, eval_ds, attack)
    out = a.out or a.candidate
    save_model(cand.graph, out)
    if eval_ds is not None:
        print(f"fine-tuned clean_acc {cand.ft_clean_acc:.6f} robust_acc {cand.ft_robustness:.6f}")
    print(f"wrote {out}")


def cmd_quantize(a):
    need(a, "model", "calib", "out")
    graph = load_model(a.model)
    calib = D.load(a.calib)
    idx = np.arange(min(a.calib_size, len(calib)))
    qm = quantize_model(graph, calib.x[idx])
    save_qmodel(qm, a.out)
    if a.check_data:
        test = D.load(a.check_data)
        fp = fuse_model(graph)
        agree = float(np.mean(quant_infer(qm, test.x).argmax(axis=1) == predict(fp, test.x)))
        print(f"int8/fp32 top-1 agreement {agree:.6f}")
    print(f"wrote {a.out}")


def cmd_estimate(a):
    need(a, "model")
    rep = model_cost(load_model(a.model), PEPolicy(a.mode, a.pe_max), a.hw)
    print(rep.table())
    if a.csv:
        with open(a.csv, "w") as fh:
            fh.write(rep.to_csv())


def cmd_simulate(a):
    need(a, "qmodel", "data")
    qm = load_qmodel(a.qmodel)
    ds = D.load(a.data)
    if not 0 <= a.image_index < len(ds):
        raise UsageError(f"image index {a.image_index} out of range for {len(ds)} samples")
    image = ds.x[a.image_index]
    policy = PEPolicy(a.mode, a.pe_max)
    logits, rep = simulate_model(qm, image, a.mode, policy, a.hw)
    print("logits " + " ".join(f"{v:.6f}" for v in logits))
    print(f"predicted {int(np.argmax(logits))}  label {int(ds.labels[a.image_index])}")
    print(rep.table(trace=a.trace))
    if a.check:
        ref = quant_infer(qm, image)
        if not np.array_equal(ref, logits):
            raise FloatingPointError("simulated logits differ from the integer reference")
        est = _estimate_engines(qm, policy, a.hw)
        got = [e.total for e in rep.conv_pool_engines]
        if got != est:
            raise FloatingPointError(f"engine cycles {got} differ from the estimate {est}")
        print(f"check ok: logits bit-identical, {len(got)} conv/pool engines match the cycle estimate")


def _estimate_engines(qm, policy, hw: HwConstants) -> list[int]:
    """Analytical cycles for each conv and pool engine of a quantized model."""
    out, first = [], True
    for blk in qm.blocks:
        if blk.kind != "conv":
            continue
        ic, _, iw = blk.in_dims
        oc, oh, ow = blk.conv_out_dims
        n_pe = policy.n_pe(oc)
        out.append(conv_latency(ConvDims(ic, oc, blk.k, blk.stride, iw, oh, ow), n_pe, hw, first))
        first = False
        if blk.pool is not None:
            p = blk.pool
            w_out = (ow + 2 * p.pad - p.k) // p.step + 1
            out.append(maxpool_latency(PoolDims(oc, oh, w_out, p.pad), n_pe, hw))
    return out


def cmd_generate(a):
    need(a, "qmodel", "out")
    qm = load_qmodel(a.qmodel)
    params = derive_layer_params(qm, PEPolicy(a.mode, a.pe_max))
    os.makedirs(a.out, exist_ok=True)
    files = {
        "layers.csv": layer_params_csv(params).encode(),
        "weights.bin": export_weight_blob(qm, params),
        "design.txt": emit_template_text(params).encode(),
    }
    if a.candidates:
        with open(os.path.join(a.candidates, "manifest.csv"), "rb") as fh:
            files["manifest.csv"] = fh.read()
    for name, blob in files.items():
        with open(os.path.join(a.out, name), "wb") as fh:
            fh.write(blob)
    print(emit_template_text(params), end="")
    print(f"wrote {', '.join(files)} to {a.out}")


def cmd_ablate(a):
    need(a, "model", "data", "out")
    graph = load_model(a.model)
    ds = D.load(a.data)
    eval_ds = D.load(a.eval_data) if a.eval_data else None
    if a.study == "guided-vs-saliency":
        runs = {"guided": _prune_config(a, "latency", a.saliency, True, a.tau),
                "saliency_only": _prune_config(a, "latency", a.saliency, False, a.tau)}
    else:
        kinds = [k.strip() for k in a.kinds.split(",")]
        runs = {k: _prune_config(a, "macs", k, True, a.tau) for k in kinds}
    curves = {}
    rows = ["run,step,cost,robustness"]
    for name, cfg in runs.items():
        curves[name] = curve(run_pruning(graph, ds, cfg, eval_ds))
        rows += [f"{name},{i},{c:g},{r!r}" for i, (c, r) in enumerate(curves[name])]
    with open(a.out, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    names = list(curves)
    if len(names) >= 2:
        cmp = compare_at_checkpoints(curves[names[0]], curves[names[1]], a.rho)
        base = curves[names[0]][0][0]
        for level, ra, rb in cmp:
            print(f"  cost {level / base:6.1%} of baseline: {names[0]} {ra:.4f}  {names[1]} {rb:.4f}")
        wins = sum(x >= y for _, x, y in cmp)
        print(f"{names[0]} >= {names[1]} at {wins}/{len(cmp)} checkpoints")
    print(f"wrote {a.out}")


# --------------------------------------------------------------------- parsing


def need(a, *names):
    missing = [n for n in names if getattr(a, n, None) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _attack_flags(p, pgd_steps: int):
    p.add_argument("--eps", type=fraction, default=fraction("8/255"))
    p.add_argument("--step", type=fraction, default=fraction("2/255"))
    p.add_argument("--pgd-steps", type=int, default=pgd_steps)


def _hw_flags(p):
    p.add_argument("--mode", choices=("streaming", "temporal"), default="streaming")
    p.add_argument("--pe-max", type=int, choices=PE_MAX_CHOICES, default=8)


def _prune_flags(p, tau: float):
    _attack_flags(p, 20)
    _hw_flags(p)
    p.add_argument("--eval-data")
    p.add_argument("--tau", type=float, default=tau)
    p.add_argument("--rho", type=float, default=0.8)
    p.add_argument("--eval-size", type=int, default=128)
    p.add_argument("--saliency-batch", type=int, default=64)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    root = argparse.ArgumentParser(prog="sarcodesign", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file supplying default flag values")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="worker cap (execution is single-threaded)")
    sub = root.add_subparsers(dest="command", required=True)
    leaves: dict[str, argparse.ArgumentParser] = {}

    ds = sub.add_parser("dataset", help="dataset utilities")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    p = ds_sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--split", default="train")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset_gen)
    leaves["dataset gen"] = p

    p = sub.add_parser("train", parents=[common], help="adversarially train a model")
    p.add_argument("--model", help="model description file")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    _attack_flags(p, 10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)
    leaves["train"] = p

    p = sub.add_parser("eval", parents=[common], help="clean and robust accuracy")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--attack", default="pgd20")
    _attack_flags(p, 20)
    p.set_defaults(func=cmd_eval)
    leaves["eval"] = p

    p = sub.add_parser("prune", parents=[common], help="hardware-guided channel pruning")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--objective", choices=OBJECTIVES, default="latency")
    p.add_argument("--saliency", choices=SALIENCY_KINDS, default="taylor")
    _prune_flags(p, 0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_prune)
    leaves["prune"] = p

    p = sub.add_parser("finetune", parents=[common], help="adversarially fine-tune a pruned candidate")
    p.add_argument("--candidate")
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05, help="base learning rate (fine-tuning uses a tenth)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--momentum", type=float, default=0.9)
    _attack_flags(p, 10)
    p.add_argument("--out", help="defaults to overwriting the candidate")
    p.set_defaults(func=cmd_finetune)
    leaves["finetune"] = p

    p = sub.add_parser("quantize", parents=[common], help="INT8 post-training quantization")
    p.add_argument("--model")
    p.add_argument("--calib")
    p.add_argument("--calib-size", type=int, default=256)
    p.add_argument("--check-data", help="report INT8/FP32 agreement on this dataset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_quantize)
    leaves["quantize"] = p

    p = sub.add_parser("estimate", parents=[common], help="analytical latency/resource estimate")
    p.add_argument("--model")
    _hw_flags(p)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_estimate)
    leaves["estimate"] = p

    p = sub.add_parser("simulate", parents=[common], help="run the engine simulator on one image")
    p.add_argument("--qmodel")
    p.add_argument("--data")
    p.add_argument("--image-index", type=int, default=0)
    _hw_flags(p)
    p.add_argument("--check", action="store_true")
    p.add_argument("--trace", action="store_true")
    p.set_defaults(func=cmd_simulate)
    leaves["simulate"] = p

    p = sub.add_parser("generate", parents=[common], help="emit accelerator parameters and weights")
    p.add_argument("--qmodel")
    _hw_flags(p)
    p.add_argument("--candidates", help="prune output directory whose manifest is copied")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)
    leaves["generate"] = p

    ab = sub.add_parser("ablate", help="pruning ablation studies")
    ab_sub = ab.add_subparsers(dest="study", required=True)
    for study, helptext in (("guided-vs-saliency", "latency-guided vs saliency-only pruning"),
                            ("saliency", "saliency functions under the MACs objective")):
        p = ab_sub.add_parser(study, parents=[common], help=helptext)
        p.add_argument("--model")
        p.add_argument("--data")
        p.add_argument("--saliency", choices=SALIENCY_KINDS, default="taylor")
        p.add_argument("--kinds", default="taylor,random")
        _prune_flags(p, 0.99)
        p.add_argument("--out")
        p.set_defaults(func=cmd_ablate)
        leaves[f"ablate {study}"] = p
    return root, leaves


def _leaf_key(ns) -> str:
    if ns.command == "dataset":
        return f"dataset {ns.action}"
    if ns.command == "ablate":
        return f"ablate {ns.study}"
    return ns.command


def parse_args(argv) -> argparse.Namespace:
    root, leaves = build_parser()
    ns = root.parse_args(argv)
    ns.hw = DEFAULT_CONSTANTS
    if not ns.config:
        return ns
    with open(ns.config) as fh:
        values = yaml.safe_load(fh) or {}
    if not isinstance(values, dict):
        raise UsageError("config file must be a mapping of flag names to values")
    values = dict(values)
    hw = HwConstants.from_mapping(values.pop("hw_constants", None))
    leaf = leaves[_leaf_key(ns)]
    actions = {a.dest: a for a in leaf._actions}
    defaults = {}
    for key, val in values.items():
        dest = str(key).replace("-", "_")
        if dest not in actions or dest in ("help", "config", "func"):
            raise UsageError(f"unknown config key {key!r} for '{_leaf_key(ns)}'")
        act = actions[dest]
        if act.type is not None and not isinstance(val, bool):
            val = act.type(val)
        if act.choices is not None and val not in act.choices:
            raise UsageError(f"config key {key!r}: {val!r} is not one of {list(act.choices)}")
        defaults[dest] = val
    leaf.set_defaults(**defaults)
    ns = root.parse_args(argv)
    ns.hw = hw
    return ns


def main(argv=None) -> int:
    level = os.environ.get("SARCODESIGN_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:  # argparse reports its own usage errors
        return EXIT_INVALID if exc.code else EXIT_OK
    except (ValueError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        args.func(args)
    except (FloatingPointError, OverflowError, QuantizationError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
