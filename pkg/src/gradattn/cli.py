"""Command-line entry point: ``gradattn {train,eval,gradcheck,diagnose}``.

Exit codes: 0 success, 1 verification failure, 2 config error, 3 I/O or
format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import tensor as T
from .config import RunConfig, parse_override
from .errors import ContractError, FormatError, NumericError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else (RunConfig.load(args.config) if args.config else RunConfig())
    overrides = dict(parse_override(s) for s in args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "precision", None):
        overrides["precision"] = args.precision
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_train(args) -> int:
    from .train import load_dataset, train_run

    cfg = _resolve_config(args)
    ds = load_dataset(cfg)  # fails before any artifact is written
    print(f"dataset {ds.name}: {len(ds)} items, {ds.num_classes} classes, shape {ds.images.shape[1:]}")
    result = train_run(cfg, args.out, ds=ds)
    print(f"done: {result.epochs_run} epochs, best epoch {result.best_epoch}, "
          f"val top1 {result.bundle.top1:.4f}, gap {result.bundle.generalization_gap:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import EvalLoader, split_and_batch
    from .metrics import evaluate
    from .train import final_bundle, load_dataset, predict, read_checkpoint

    _, config, _ = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, RunConfig.from_dict(config))
    ds = load_dataset(cfg)
    with T.precision(cfg.precision):
        model, _, _ = read_checkpoint(args.checkpoint, ds)
        if args.split == "val":
            train_loader, val_loader = split_and_batch(ds, cfg.split_config())
            bundle = final_bundle(model, EvalLoader(ds, train_loader.indices, cfg.batch_size), val_loader)
        else:
            import numpy as np
            preds, loss = predict(model, EvalLoader(ds, np.arange(len(ds)), cfg.batch_size))
            bundle = evaluate(preds, loss=loss)
    text = bundle.to_json()
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CASES, THRESHOLD, coverage, run_suite

    names = args.only or list(CASES)
    unknown = set(names) - set(CASES)
    if unknown:
        raise ContractError(f"unknown gradcheck cases: {sorted(unknown)}")
    results = run_suite(names, seed=args.seed or 0, echo=print)
    covered, missing = coverage(results)
    print(f"ops exercised: {', '.join(sorted(covered))}")
    failed = [r.name for r in results if not r.passed]
    if missing and not args.only:
        print(f"COVERAGE GAP: ops never exercised: {sorted(missing)}")
        failed.append("coverage")
    print(f"{len(results) - len([f for f in failed if f != 'coverage'])}/{len(results)} cases below {THRESHOLD:g}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_diagnose(args) -> int:
    from .checkpoint import load_checkpoint
    from .graddiag import records_to_csv
    from .train import diagnose, load_dataset, read_checkpoint

    if args.steps < 1:
        raise ContractError("--steps must be >= 1 (no records otherwise)")
    _, config, _ = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, RunConfig.from_dict(config))
    ds = load_dataset(cfg)
    with T.precision(cfg.precision):
        model, _, _ = read_checkpoint(args.checkpoint, ds)
        records, report = diagnose(model, cfg, ds, args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnose_gradflow.csv").write_text(records_to_csv(records))
    (out / "diagnose_report.json").write_text(report.to_json())
    print(json.dumps(report.summary()))
    for name in report.vanishing_layers:
        print(f"vanishing: {name}")
    for name in report.exploding_layers:
        print(f"exploding: {name}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--precision", choices=("float32", "float64"))

    p = sub.add_parser("train", help="train a model and write run artifacts")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "all"), default="val")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--only", nargs="*", help="run a subset of cases")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("diagnose", help="gradient-health report for a checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
