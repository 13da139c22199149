"""Command-line entry point: ``trice <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import generate_synthetic, load_dataset, read_idx, save_dataset
from .errors import ConfigError, NumericError, ParseError
from .experiment import (METHODS, ExperimentConfig, build_network, eval_seed, load_data,
                         run_experiment, train_method)
from .kpp import quant_eval, substream, write_samples
from .nn import Evaluator, calibrate_activations
from .quant import DEVICE_KINDS, DeviceModel, QuantConfig
from .theory import DerivativeTriple, loss_q_analytic, loss_q_exact, loss_q_mc

log = logging.getLogger("trice")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--device", choices=DEVICE_KINDS)
    p.add_argument("--sigma-d", type=_float_list, help="comma-separated sigma_d values")
    p.add_argument("--q", type=float)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--epochs", type=int)


def _config(args, **extra) -> ExperimentConfig:
    overrides = {"seed": args.seed, "device": args.device, "sigma_d": args.sigma_d, "q": args.q,
                 "n_samples": args.n_samples, "epochs": args.epochs, **extra}
    if args.config:
        return ExperimentConfig.load(args.config, **overrides)
    return ExperimentConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def cmd_train(args):
    cfg = _config(args, methods=[args.method] if args.method else None)
    if len(cfg.methods) != 1 or len(cfg.sigma_d) != 1:
        raise ConfigError("train takes exactly one method and one sigma_d")
    method, sigma_d = cfg.methods[0], cfg.sigma_d[0]
    os.makedirs(args.out, exist_ok=True)
    train_data, val, test = load_data(cfg, cfg.seed)
    classes = int(max(train_data.labels.max(), test.labels.max())) + 1
    network = build_network(cfg, int(np.prod(train_data.inputs.shape[1:])), classes)
    log_path = os.path.join(args.out, "train_log.jsonl")
    with open(log_path, "w") as log_file:
        weights, sigma_t = train_method(network, cfg, method, sigma_d, cfg.seed, train_data, val,
                                        log_file)
    if network.act_bits:
        weights = calibrate_activations(network, weights, train_data.inputs[:256])
    path = os.path.join(args.out, "checkpoint.json")
    save_checkpoint(path, Checkpoint(network, weights, {
        "method": method, "seed": cfg.seed, "sigma_d": sigma_d, "sigma_t": sigma_t,
        "config": cfg.to_dict()}))
    print(f"wrote {path} (test accuracy {Evaluator(network, test).accuracy(weights):.4f})")


def cmd_eval(args):
    ck = load_checkpoint(args.checkpoint)
    cfg = _config(args)
    _, _, test = load_data(cfg, cfg.seed)
    ev = Evaluator(ck.network, test)
    quant = QuantConfig(cfg.H, cfg.B)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for sigma_d in cfg.sigma_d:
        est = quant_eval(ck.network, ck.weights, quant, DeviceModel(cfg.device, sigma_d), cfg.q,
                         test, cfg.n_samples, eval_seed(cfg.seed), evaluator=ev)
        write_samples(os.path.join(args.out, f"samples_sd{sigma_d:g}.txt"), est.samples)
        rows.append((sigma_d, est.value, *est.ci95))
        print(f"sigma_d={sigma_d:g} kpp={est.value:.4f} ci95=[{est.ci95[0]:.4f}, {est.ci95[1]:.4f}]")
    with open(os.path.join(args.out, "eval.csv"), "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sigma_d", "kpp", "ci_lo", "ci_hi"))
        w.writerows([[repr(float(v)) for v in r] for r in rows])


def cmd_sweep(args):
    extra = {"methods": args.method.split(",") if args.method else None, "repeat": args.repeat}
    cfg = _config(args, **extra)
    rows = run_experiment(cfg, args.out)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"wrote {os.path.join(args.out, 'results.csv')}: {len(rows)} rows, {failed} failed")


def cmd_theory(args):
    rng = substream(args.seed or 0, 0)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "theory.csv")
    with open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("f1", "f2", "sigma_d", "q", "lossq_closed", "lossq_exact", "lossq_mc"))
        for f1 in args.f1:
            for f2 in args.f2:
                d = DerivativeTriple(args.f0, f1, f2)
                for sigma_d in args.sigma_d or [0.1]:
                    for q in args.q:
                        w.writerow([repr(v) for v in (
                            f1, f2, sigma_d, q, loss_q_analytic(d, sigma_d, q),
                            loss_q_exact(d, sigma_d, q),
                            loss_q_mc(d, sigma_d, q, args.n_samples, rng))])
    print(f"wrote {path}")


def cmd_dataset_gen(args):
    ds = generate_synthetic(args.classes, args.per_class, args.seed, dim=args.dim,
                            separation=args.separation)
    save_dataset(args.output, ds)
    print(f"wrote {args.output}: {len(ds)} samples, {args.classes} classes, dim {args.dim}")


def cmd_dataset_inspect(args):
    if args.path.endswith(".npz"):
        ds = load_dataset(args.path)
        info = {"kind": "dataset", "samples": len(ds), "input_shape": list(ds.inputs.shape[1:]),
                "class_counts": np.bincount(ds.labels).tolist()}
    else:
        a = read_idx(args.path)
        if a.ndim == 1:
            info = {"kind": "labels", "count": len(a),
                    "class_counts": np.bincount(a, minlength=10).tolist()}
        else:
            info = {"kind": "images", "shape": list(a.shape),
                    "mean_intensity": float(a.mean()) if a.size else None}
    print(json.dumps(info))


def build_parser():
    ap = argparse.ArgumentParser(prog="trice", description="Variation-aware training and "
                                 "percentile evaluation of quantized networks on NVM devices.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    _common(p)
    p.add_argument("--method", choices=METHODS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="KPP of a checkpoint under device variation")
    _common(p)
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate every (method, sigma_d) cell")
    _common(p)
    p.add_argument("--method", help="comma-separated methods")
    p.add_argument("--repeat", type=int, help="runs with seeds seed..seed+N-1")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("theory", help="compare loss-percentile predictors on a grid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--f0", type=float, default=1.0)
    p.add_argument("--f1", type=_float_list, default=[0.0, 0.5, 1.0])
    p.add_argument("--f2", type=_float_list, default=[1.0, 2.0])
    p.add_argument("--sigma-d", type=_float_list)
    p.add_argument("--q", type=_float_list, default=[0.01])
    p.add_argument("--n-samples", type=int, default=100000)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("dataset", help="synthetic data generation and file inspection")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    g = dsub.add_parser("gen", help="write a synthetic Gaussian-blob dataset (.npz)")
    g.add_argument("output")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--separation", type=float, default=10.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_dataset_gen)
    i = dsub.add_parser("inspect", help="summarize an IDX file or saved dataset")
    i.add_argument("path")
    i.set_defaults(func=cmd_dataset_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ParseError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
