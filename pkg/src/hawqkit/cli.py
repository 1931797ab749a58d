"""Command-line entry point: ``hawqkit <command> [options]``.

Each command reads a YAML run config (``--config``; defaults when omitted),
writes its artifacts under ``--out`` (default: the config's output_dir) and
prints the written paths. Failures exit nonzero with a JSON error object on
stderr. Artifacts contain no timestamps, so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint
from ._io import SCHEMA_VERSION, atomic_write_text, read_json, write_json
from .config import load_config, make_datasets
from .errors import FormatError, HawqError

log = logging.getLogger("hawqkit")


def _out(args, cfg, name):
    d = args.out or cfg.output_dir
    os.makedirs(d, exist_ok=True)
    return os.path.join(d, name)


def _doc(kind, **body):
    return {"schema": SCHEMA_VERSION, "kind": kind, **body}


def _read_doc(path, kind):
    try:
        doc = read_json(path)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("kind") != kind:
        raise FormatError(f"{path} is not a {kind} document")
    if doc.get("schema") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema {doc.get('schema')!r}")
    return doc


def _estimates(doc, partition):
    """Eigen records from a probe document, checked against the partition."""
    recs = doc["blocks"]
    if [r["block"] for r in recs] != partition.names:
        raise FormatError("probe output does not match the model's blocks")
    return {r["block"]: float(r["lambda"]) for r in recs}


# -- commands -----------------------------------------------------------------

def cmd_train(args, cfg):
    from .models import build_model
    from .trainer import train_fp

    train, ev = make_datasets(cfg)
    model, part = build_model(cfg.model_spec(), cfg.seed)
    tlog = train_fp(model, train, cfg.optimizer("train"), ev)
    ck = _out(args, cfg, "model.ckpt")
    checkpoint.save(ck, model, {"stage": "fp", "seed": cfg.seed})
    atomic_write_text(_out(args, cfg, "train_log.csv"), tlog.to_csv())
    write_json(_out(args, cfg, "train.json"), _doc(
        "train", seed=cfg.seed, partition=part.to_dict(), num_params=model.num_params,
        accuracy=tlog.final_accuracy, epochs=tlog.total_epochs, stages=tlog.stages))
    return [ck, _out(args, cfg, "train_log.csv"), _out(args, cfg, "train.json")]


def _load_ckpt(args):
    if not args.checkpoint:
        raise FormatError("--checkpoint is required")
    return checkpoint.load(args.checkpoint)[0]


def cmd_probe(args, cfg):
    from .hessian import probe_all

    model = _load_ckpt(args)
    train, _ = make_datasets(cfg)
    tops = probe_all(model, train, cfg.probe_config())
    path = _out(args, cfg, "eigen.json")
    write_json(path, _doc("eigen", probe=vars(cfg.probe) | {"seed": cfg.seed},
                          blocks=[t.to_record() | {"n": model.partition.block(t.block).size}
                                  for t in tops]))
    return [path]


def cmd_plan(args, cfg):
    from .planner import (assign_bits, finetune_order, omega_scores, score_table_csv,
                          sensitivity_scores)

    if not args.eigen:
        raise FormatError("--eigen is required")
    doc = _read_doc(args.eigen, "eigen")
    model = _load_ckpt(args) if args.checkpoint else None
    if model is not None:
        part = model.partition
    else:
        from .models import build_model
        part = build_model(cfg.model_spec(), cfg.seed)[1]
    eig = _estimates(doc, part)
    records = sensitivity_scores(eig, part)
    p = cfg.plan
    plan = assign_bits(records, p.palette, cfg.budget(), p.a_bits, p.a_bits_first, p.a_bits_last)
    body = {"plan": plan.to_dict(), "S": [r.S for r in records]}
    omegas = None
    if model is not None:
        omegas = omega_scores(model, plan, eig)
        body["omega"] = [o.omega for o in omegas]
        body["order"] = finetune_order(omegas)
    path = _out(args, cfg, "plan.json")
    write_json(path, _doc("plan", **body))
    table = _out(args, cfg, "plan_scores.csv")
    atomic_write_text(table, score_table_csv(records, plan, omegas))
    return [path, table]


def cmd_finetune(args, cfg):
    from .planner import PrecisionPlan, finetune_order, omega_scores
    from .trainer import direct_quantize, hawq_finetune

    model = _load_ckpt(args)
    if not args.plan:
        raise FormatError("--plan is required")
    doc = _read_doc(args.plan, "plan")
    plan = PrecisionPlan.from_dict(doc["plan"])
    train, ev = make_datasets(cfg)
    opt = cfg.optimizer("finetune")
    if args.mode == "direct":
        qm, tlog = direct_quantize(model, plan, opt, train, ev)
        order = None
    else:
        order = doc.get("order")
        if order is None:
            if not args.eigen:
                raise FormatError("plan has no fine-tuning order; pass --eigen or a plan made "
                                  "with --checkpoint")
            eig = _estimates(_read_doc(args.eigen, "eigen"), model.partition)
            order = finetune_order(omega_scores(model, plan, eig))
        qm, tlog = hawq_finetune(model, plan, order, opt, train, ev)
    ck = _out(args, cfg, "quantized.ckpt")
    checkpoint.save(ck, qm, {"stage": args.mode, "seed": cfg.seed})
    atomic_write_text(_out(args, cfg, "finetune_log.csv"), tlog.to_csv())
    write_json(_out(args, cfg, "finetune.json"), _doc(
        "finetune", mode=args.mode, order=order, accuracy=tlog.final_accuracy,
        epochs=tlog.total_epochs, epochs_to_converge=tlog.epochs_to_converge(),
        stages=tlog.stages, plan=plan.to_dict()))
    return [ck, _out(args, cfg, "finetune_log.csv"), _out(args, cfg, "finetune.json")]


def prepare_seed(cfg, seed):
    """Data, pre-trained model, its TrainLog and eigen estimates for one seed."""
    from .hessian import probe_all
    from .models import build_model
    from .trainer import train_fp

    train, ev = make_datasets(cfg, seed)
    model, _ = build_model(cfg.model_spec(), seed)
    fp = train_fp(model, train, cfg.optimizer("train", seed), ev)
    eig = probe_all(model, train, cfg.probe_config(seed))
    return {"train": train, "eval": ev, "model": model, "fp": fp, "eigen": eig}


def ablation_config(cfg):
    from .trainer import AblationConfig

    p = cfg.plan
    return AblationConfig(tuple(p.palette), p.budget_ratio, p.a_bits, p.a_bits_first,
                          p.a_bits_last, tuple(cfg.ablate.variants))


def run_ablation(cfg, seeds=None, prepared=None):
    """Pre-train, probe and run every ablation arm for each seed.

    ``prepared`` maps seed -> :func:`prepare_seed` output to skip pre-training.
    """
    from .trainer import TrainLog, ablate

    acfg = ablation_config(cfg)
    runs = []
    for seed in (cfg.seeds if seeds is None else seeds):
        pre = (prepared or {}).get(seed) or prepare_seed(cfg, seed)
        res = ablate(pre["model"], pre["eigen"], pre["train"], pre["eval"],
                     cfg.optimizer("finetune", seed), acfg)
        res["seed"] = seed
        res["fp_accuracy"] = pre["fp"].final_accuracy
        res["eigen"] = [e.to_record() for e in pre["eigen"]]
        for v in res["variants"].values():
            tl = TrainLog(v["log"]["rows"], v["log"]["stages"])
            v["csv"] = tl.to_csv()
        runs.append(res)
        log.info("seed %d: %s", seed, {k: v["accuracy"] for k, v in res["variants"].items()})
    return runs, acfg


def ablation_summary(runs):
    names = list(runs[0]["variants"])
    mean = {v: float(np.mean([r["variants"][v]["accuracy"] for r in runs])) for v in names}
    conv = {v: float(np.mean([r["variants"][v]["epochs_to_converge"] for r in runs]))
            for v in names}
    return {"mean_accuracy": mean, "mean_epochs_to_converge": conv,
            "seeds": [r["seed"] for r in runs]}


def cmd_ablate(args, cfg):
    runs, acfg = run_ablation(cfg, args.seeds)
    paths = []
    for r in runs:
        for name, v in r["variants"].items():
            path = _out(args, cfg, f"ablate_seed{r['seed']}_{name}.csv")
            atomic_write_text(path, v.pop("csv"))
            paths.append(path)
    path = _out(args, cfg, "ablation.json")
    write_json(path, _doc("ablation", config=acfg.to_dict(), runs=runs,
                          summary=ablation_summary(runs)))
    return paths + [path]


def cmd_landscape(args, cfg):
    from .hessian import power_iteration, probe_subset, second_eigenpair
    from .landscape import curvature_along, landscape_1d, landscape_2d, to_csv

    model = _load_ckpt(args)
    train, _ = make_datasets(cfg)
    pc = cfg.landscape_probe_config()
    batch = probe_subset(train, pc)
    xy = (batch.features, batch.labels)
    ls = cfg.landscape
    blocks = args.blocks or ls.blocks or model.partition.names
    one, two, summary = [], [], []
    for b in blocks:
        top = power_iteration(model, b, pc, batch)
        one += landscape_1d(model, b, top.eigenvector, xy, ls.grid())
        rec = {"block": model.partition.block(b).name, "lambda": top.lam,
               "fd_curvature": curvature_along(model, b, top.eigenvector, xy)}
        if ls.second:
            sec = second_eigenpair(model, b, top, pc, batch)
            two += landscape_2d(model, b, top.eigenvector, sec.eigenvector, xy,
                                ls.grid(ls.points_2d))
            rec["lambda2"] = sec.lam
        summary.append(rec)
    paths = [_out(args, cfg, "landscape_1d.csv")]
    atomic_write_text(paths[0], to_csv(one))
    if ls.second:
        paths.append(_out(args, cfg, "landscape_2d.csv"))
        atomic_write_text(paths[-1], to_csv(two))
    paths.append(_out(args, cfg, "landscape.json"))
    write_json(paths[-1], _doc("landscape", blocks=summary))
    return paths


def cmd_report(args, cfg):
    from .report import compression_report, load_fixture, parse_fixture, verify_fixture

    if args.fixture:
        src = args.fixture
        fx = parse_fixture(open(src).read()) if os.path.exists(src) else load_fixture(src)
        ok, got, want = verify_fixture(fx)
        path = _out(args, cfg, f"fixture_{os.path.splitext(os.path.basename(src))[0]}.json")
        write_json(path, _doc("fixture_check", passed=ok, w_comp=round(float(got), 2),
                              w_comp_exact=[got.numerator, got.denominator],
                              expected=float(want)))
        if not ok:
            raise HawqError(f"fixture W-Comp {float(got):.4f} differs from {float(want)}")
        return [path]
    from .models import accuracy
    from .planner import PrecisionPlan

    model = _load_ckpt(args)
    if args.plan:
        plan = PrecisionPlan.from_dict(_read_doc(args.plan, "plan")["plan"])
    else:
        plan = PrecisionPlan.uniform(model.partition, 32)
        for name, q in model.weight_quant.items():
            plan.w_bits[model.partition.index(name)] = q.bits
    if not plan.matches(model.partition):
        raise FormatError("plan does not match the checkpoint's blocks")
    _, ev = make_datasets(cfg)
    acc = accuracy(model, ev)
    sites = model.act_sites()
    names = model.partition.names
    # activation bits per site come from the owning block
    act_bits = [plan.a_bits[names.index(b)] for b in sites.values()]
    act_sizes = [model.act_state[s].numel if s in model.act_state else 1 for s in sites]
    rep = compression_report(model.partition, plan, act_bits, acc, act_sizes)
    rep.a_bits = list(plan.a_bits)
    path = _out(args, cfg, "report.json")
    write_json(path, rep.to_dict())
    print(rep.summary())
    return [path]


COMMANDS = {
    "train": (cmd_train, "train the full-precision model and save a checkpoint"),
    "probe": (cmd_probe, "top Hessian eigenvalue of every block"),
    "plan": (cmd_plan, "bit allocation (and Ω fine-tuning order with --checkpoint)"),
    "finetune": (cmd_finetune, "multi-stage HAWQ or direct quantization-aware fine-tuning"),
    "ablate": (cmd_ablate, "HAWQ vs reverse-precision, reverse-tuning and direct, per seed"),
    "landscape": (cmd_landscape, "loss along the top eigenvectors of each block"),
    "report": (cmd_report, "compression report for a checkpoint, or verify a fixture"),
}


def build_parser():
    ap = argparse.ArgumentParser(prog="hawqkit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML run config (defaults if omitted)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if name in ("probe", "plan", "finetune", "landscape", "report"):
            p.add_argument("--checkpoint", help="input checkpoint")
        if name in ("plan", "finetune"):
            p.add_argument("--eigen", help="eigen.json from probe")
        if name in ("finetune", "report"):
            p.add_argument("--plan", help="plan.json from plan")
        if name == "finetune":
            p.add_argument("--mode", choices=["hawq", "direct"], default="hawq")
        if name == "ablate":
            p.add_argument("--seeds", type=int, nargs="+", help="override config seeds")
        if name == "landscape":
            p.add_argument("--blocks", nargs="+", help="block names (default: all)")
        if name == "report":
            p.add_argument("--fixture", help="fixture CSV path or packaged name "
                                             "(resnet20, inception_v3)")
    return ap


def _fail(command, exc, code):
    err = {"error": getattr(exc, "code", type(exc).__name__), "command": command,
           "message": str(exc), "type": type(exc).__name__}
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    fn = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config)
        for path in fn(args, cfg):
            print(path)
    except HawqError as exc:
        return _fail(args.command, exc, 2)
    except (ValueError, OSError, KeyError) as exc:
        return _fail(args.command, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
