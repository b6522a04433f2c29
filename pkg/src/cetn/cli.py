"""Command-line entry point: prepare, train, eval, ablate, repr-dump, selfcheck.

Exit codes: 0 ok, 1 failed self-check property, 2 configuration or data
problem, 3 numeric abort during training.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from . import selfcheck
from .config import ExperimentConfig, ablation_config, load_config
from .data import (
    ConfigurationError,
    DatasetSchema,
    PreparedData,
    SplitSpec,
    prepare_presplit,
    prepare_rows,
    read_csv,
)
from .metrics import Metrics, UndefinedMetricError, relaimpr
from .model import CETN, SPACES, NumericError
from .trainer import evaluate, train

log = logging.getLogger("cetn")

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

ABLATION_VARIANTS = [
    ("full", ()),
    ("-A", ("A",)),
    ("-CL", ("CL",)),
    ("-COS", ("COS",)),
    ("-K", ("K",)),
    ("-P", ("P",)),
    ("-T", ("T",)),
]
ABLATION_COLUMNS = [
    "variant", "val_auc", "val_logloss", "test_auc", "test_logloss",
    "best_epoch", "epochs", "max_abs_cl_term", "max_abs_cos_term", "seconds",
]


def _resolve(args) -> ExperimentConfig:
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "data", None):
        overrides.append(f"data.path={json.dumps(str(args.data))}")
    cfg = load_config(args.config, overrides)
    if not cfg.data.path:
        raise ConfigurationError("no dataset given: set data.path in the config or pass --data")
    return cfg


def _metrics_line(prefix: str, m: Metrics) -> str:
    return f"{prefix} auc={m.auc:.6f} logloss={m.logloss:.6f}"


def _write_metrics(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    schema = DatasetSchema.load(args.schema)
    if args.csv:
        rows = read_csv(args.csv, schema)
        data = prepare_rows(rows, schema, SplitSpec.parse(args.split, args.seed), args.min_count)
    elif args.train and args.valid and args.test:
        data = prepare_presplit(
            read_csv(args.train, schema), read_csv(args.valid, schema), read_csv(args.test, schema),
            schema, args.min_count,
        )
    else:
        raise ConfigurationError("prepare needs --csv, or all of --train/--valid/--test")
    data.save(args.out)
    for name, vocab in data.vocabs.items():
        print(f"{name}\t{vocab.size}")
    print(f"total_features\t{data.total_features}")
    print(f"sizes\ttrain={len(data.train)} val={len(data.val)} test={len(data.test)}")
    return EXIT_OK


def run_training(cfg: ExperimentConfig, out: Path):
    data = PreparedData.load(cfg.data.path)
    result = train(cfg, data, out)
    if result.val is None:  # max_epochs = 0: report the initialized model
        result.val = evaluate(result.model, data.val, cfg.train.eval_batch_size)
    test = evaluate(result.model, data.test, cfg.train.eval_batch_size)
    payload = {
        "variant": result.model.variant.label,
        "best_epoch": result.log.best_epoch,
        "epochs": len(result.log.epochs),
        "val_auc": result.val.auc,
        "val_logloss": result.val.logloss,
        "test_auc": test.auc,
        "test_logloss": test.logloss,
    }
    _write_metrics(out / "metrics.json", payload)
    return result, test, payload


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    result, test, _ = run_training(cfg, out)
    print(_metrics_line("val ", result.val))
    print(_metrics_line("test", test))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = CETN.load(args.checkpoint)
    data = PreparedData.load(args.data)
    m = evaluate(model, getattr(data, args.split))
    print(_metrics_line(f"{args.split}", m))
    if args.baseline:
        with open(args.baseline, encoding="utf-8") as fh:
            b = json.load(fh)
        base = Metrics(float(b["auc"]), float(b["logloss"]))
        try:
            auc_pct, ll_pct = relaimpr(m, base)
        except UndefinedMetricError as exc:
            raise ConfigurationError(str(exc)) from exc
        print(f"relaimpr auc={auc_pct:+.4f}% logloss={ll_pct:+.4f}%")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, abl in ABLATION_VARIANTS:
        cfg = ablation_config(base, abl)
        result, test, payload = run_training(cfg, out / name.lstrip("-").lower())
        steps = result.log.steps
        rows.append({
            "variant": name,
            "val_auc": payload["val_auc"],
            "val_logloss": payload["val_logloss"],
            "test_auc": test.auc,
            "test_logloss": test.logloss,
            "best_epoch": result.log.best_epoch,
            "epochs": len(result.log.epochs),
            "max_abs_cl_term": max((abs(s["cl_term"]) for s in steps), default=0.0),
            "max_abs_cos_term": max((abs(s["cos1_term"]) + abs(s["cos2_term"]) for s in steps), default=0.0),
            "seconds": sum(e.seconds for e in result.log.epochs),
        })
        print(f"{name:5s} " + _metrics_line("test", test))
    write_comparison(rows, out / "ablation.csv")
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


def write_comparison(rows: List[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.3f}" if k == "seconds" else repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def representations(model: CETN, indices: np.ndarray) -> List[np.ndarray]:
    """Noise-free value vectors V, V', V'' for a batch of encoded instances."""
    tape = ad.Tape()
    params = {k: tape.constant(v) for k, v in model.params.items()}
    _, spaces, _ = model.forward(tape, indices, None, params)
    return [np.atleast_2d(s.V.value).reshape(len(indices), -1) for s in spaces]


def cmd_repr_dump(args) -> int:
    model, _ = CETN.load(args.checkpoint)
    ds = getattr(PreparedData.load(args.data), args.split)
    if args.n > len(ds):
        raise ConfigurationError(f"n={args.n} exceeds the {args.split} split size {len(ds)}")
    pick = np.sort(np.random.default_rng(args.seed).choice(len(ds), size=args.n, replace=False))
    vals = representations(model, ds.instances[pick])
    width = vals[0].shape[1]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "space"] + [f"v_{j}" for j in range(width)])
        for r, inst in enumerate(pick):
            for space, v in zip(SPACES, vals):
                w.writerow([int(inst), space] + [repr(float(x)) for x in v[r]])
    print(f"wrote {3 * args.n} rows to {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    report = selfcheck.run(op_trials=args.trials)
    for r in report.results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.detail}")
    print(f"{len(report.results) - len(report.failures)}/{len(report.results)} checks passed in {report.seconds:.1f}s")
    if report.seconds > 60:
        log.warning("self-check took %.1fs, over the 60s budget", report.seconds)
    return EXIT_OK if report.passed else EXIT_PROPERTY


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cetn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp):
        sp.add_argument("--config", help="TOML or JSON experiment config")
        sp.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE", help="repeatable")
        sp.add_argument("--seed", type=int, help="shorthand for --override train.seed=N")
        sp.add_argument("--data", help="prepared dataset directory (overrides data.path)")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("prepare", help="encode a raw CSV into a prepared dataset")
    sp.add_argument("--schema", required=True, help="JSON schema file")
    sp.add_argument("--csv", help="single CSV, split by --split")
    sp.add_argument("--train")
    sp.add_argument("--valid")
    sp.add_argument("--test")
    sp.add_argument("--split", default="7:2:1")
    sp.add_argument("--min-count", type=int, default=2)
    sp.add_argument("--seed", type=int, default=2023)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train one model")
    run_opts(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ablate", help="train the full model and its six ablations")
    run_opts(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--baseline", help='JSON file {"auc": ..., "logloss": ...}')
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("repr-dump", help="dump V, V', V'' of sampled instances as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=2023)
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.set_defaults(func=cmd_repr_dump)

    sp = sub.add_parser("selfcheck", help="gradient and identity checks")
    sp.add_argument("--trials", type=int, default=5, help="random trials per op gradient check")
    sp.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
