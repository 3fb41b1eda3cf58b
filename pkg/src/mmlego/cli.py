"""Command-line driver.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
divergence.  Failures print one JSON line ``{"error", "code", "message"}``
to stderr.
"""

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import persistence, training
from .config import load_config
from .datagen import generate, load_dataset, save_dataset
from .errors import ConfigError, DataError, MMLegoError, NumericError
from .experiments import (Split, evaluate, fuse, merge, overlap_sweep, spectral_checks,
                          train_block)
from .spectral import INTERFERENCE_KINDS, interference_sweep, write_interference_csv

log = logging.getLogger("mmlego")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_csv(path, rows, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def _emit(record):
    print(json.dumps(record, sort_keys=True, default=str))


def _split(args, dataset):
    if not dataset.folds:
        raise DataError("dataset has no fold assignments")
    if not 0 <= args.fold < len(dataset.folds):
        raise ConfigError(f"fold {args.fold} out of range (dataset has {len(dataset.folds)})")
    return Split.from_fold(dataset, args.fold)


def cmd_generate(args):
    cfg = load_config(args.config, args.profile)
    spec = cfg.data if args.seed is None else replace(cfg.data, seed=args.seed)
    ds = generate(spec)
    save_dataset(ds, args.out)
    _emit({"command": "generate", "out": str(args.out), "n_samples": len(ds),
           "modalities": ds.modality_names, "overlap": spec.overlap})


def cmd_train_block(args):
    cfg = load_config(args.config, args.profile)
    ds = load_dataset(args.data)
    if args.modality not in ds.modalities:
        raise ConfigError(f"unknown modality {args.modality!r}; have {ds.modality_names}")
    split = _split(args, ds)
    block, info = train_block(cfg, split, args.modality, args.seed)
    persistence.save(block, args.out, extra={"config": cfg.to_dict(), "fold": args.fold})
    metrics = {part: evaluate(block, split, part) for part in ("val", "test")}
    rows = [{"epoch": h["epoch"], "train_loss": h["train_loss"], "val_loss": h["val_loss"],
             "val_metric": h["val_metric"], "lr": h["lr"], "seconds": h["seconds"]}
            for h in info["history"]]
    metrics_path = args.metrics or str(Path(args.out).with_suffix(".csv"))
    _write_csv(metrics_path, rows, ["epoch", "train_loss", "val_loss", "val_metric", "lr",
                                    "seconds"])
    _emit({"command": "train-block", "modality": args.modality, "out": str(args.out),
           "metric": training.METRIC_NAMES[ds.task.kind], "val": metrics["val"],
           "test": metrics["test"], "epochs_run": info["epochs_run"],
           "epoch_seconds": info["epoch_seconds"], "gradient_steps": info["steps"],
           "overrides": cfg.overrides})


def _load_blocks(paths):
    models = [persistence.load(p) for p in paths]
    for p, m in zip(paths, models):
        if m.kind != "block":
            raise ConfigError(f"{p} holds a {m.kind} model, expected a block")
    return models


def cmd_merge(args):
    cfg = load_config(args.config, args.profile)
    blocks = _load_blocks(args.blocks)
    t0 = time.perf_counter()
    model, report = merge(cfg, blocks)
    persistence.save(model, args.out, extra={"sources": [str(p) for p in args.blocks]})
    record = {"command": "merge", "out": str(args.out), "modalities": model.modalities,
              "gradient_steps": report["gradient_steps"], "merge_seconds": report["seconds"],
              "wall_seconds": time.perf_counter() - t0}
    if args.data:
        ds = load_dataset(args.data)
        record[args.split] = evaluate(model, _split(args, ds), args.split)
    _emit(record)


def cmd_fuse(args):
    cfg = load_config(args.config, args.profile)
    blocks = _load_blocks(args.blocks)
    ds = load_dataset(args.data)
    split = _split(args, ds)
    model, report = fuse(cfg, split, blocks, args.seed, method=args.method, epochs=args.epochs)
    persistence.save(model, args.out, extra={"sources": [str(p) for p in args.blocks]})
    _emit({"command": "fuse", "out": str(args.out), "method": model.fuse_method,
           "epochs": args.epochs, "pre_val": report["pre_metric"],
           "post_val": report["post_metric"], "test": evaluate(model, split),
           "gradient_steps": report["steps"], "seconds": report["seconds"]})


def cmd_eval(args):
    model = persistence.load(args.model)
    ds = load_dataset(args.data)
    split = _split(args, ds)
    mask = tuple(args.mask_modality or ())
    if model.kind == "block" and mask:
        raise ConfigError("masking only applies to merged, fused or ensemble models")
    for m in mask:
        if m not in ds.modalities:
            raise ConfigError(f"unknown modality {m!r}")
    metric = evaluate(model, split, args.split, mask)
    row = {"model": str(args.model), "kind": model.kind, "split": args.split,
           "masked": "|".join(mask), "metric_name": training.METRIC_NAMES[ds.task.kind],
           "metric": metric}
    if args.out:
        _write_csv(args.out, [row], list(row))
    _emit(dict(row, command="eval"))


def cmd_demo(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.which == "parseval":
        rows = spectral_checks(seed=args.seed)
        _write_csv(out / "parseval.csv", rows, ["size", "check", "value", "tol", "passed"])
        ok = all(r["passed"] for r in rows)
        _emit({"command": "demo parseval", "passed": ok, "checks": len(rows),
               "csv": str(out / "parseval.csv")})
        return 0 if ok else 3
    summary = {}
    for kind in INTERFERENCE_KINDS:
        reports = interference_sweep(kind, range(args.seeds), phase_mode=args.phase_mode)
        write_interference_csv(reports, out / f"interference_{kind}.csv")
        summary[kind] = {agg: sum(r["ratios"][agg] for r in reports) / len(reports)
                         for agg in reports[0]["ratios"]}
    _emit({"command": "demo interference", "seeds": args.seeds, "mean_retained": summary,
           "out": str(out)})
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config, args.profile)
    rhos = [float(r) for r in args.rhos.split(",")]
    seeds = list(range(args.seeds)) if args.seed_list is None else args.seed_list
    rows = overlap_sweep(cfg, rhos, seeds)
    _write_csv(args.out, rows, ["rho", "seed", "model", "metric"])
    merged = {r: [x["metric"] for x in rows if x["rho"] == r and x["model"] == "merge"]
              for r in rhos}
    _emit({"command": "sweep overlap", "out": str(args.out),
           "merge_mean": {str(r): sum(v) / len(v) for r, v in merged.items()}})


def build_parser():
    p = _Parser(prog="mmlego", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=False):
        sp.add_argument("--config", default=None, help="YAML or JSON run config")
        sp.add_argument("--profile", choices=("full", "desk"), default=None)
        if data:
            sp.add_argument("--fold", type=int, default=0)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train-block", help="train one LegoBlock")
    common(t, data=True)
    t.add_argument("--data", required=True)
    t.add_argument("--modality", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--metrics", default=None, help="per-epoch CSV (default: next to --out)")
    t.set_defaults(func=cmd_train_block)

    m = sub.add_parser("merge", help="LegoMerge trained blocks (no training)")
    common(m, data=True)
    m.add_argument("--blocks", nargs="+", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--data", default=None, help="dataset to evaluate the merged model on")
    m.add_argument("--split", choices=("train", "val", "test"), default="test")
    m.set_defaults(func=cmd_merge)

    f = sub.add_parser("fuse", help="LegoFuse blocks and fine-tune on paired data")
    common(f, data=True)
    f.add_argument("--blocks", nargs="+", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--epochs", type=int, default=2)
    f.add_argument("--method", choices=("stack", "weave"), default="stack")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--fold", type=int, default=0)
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--mask-modality", action="append", default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("demo", help="spectral demonstrations")
    d.add_argument("which", choices=("interference", "parseval"))
    d.add_argument("--seeds", type=int, default=100)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--phase-mode", choices=("literal", "circular"), default="literal")
    d.add_argument("--out", default="runs/demo")
    d.set_defaults(func=cmd_demo)

    s = sub.add_parser("sweep", help="unpaired-overlap sweep")
    common(s)
    s.add_argument("which", choices=("overlap",))
    s.add_argument("--rhos", default="0,0.25,0.5,0.75,1")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--seed-list", type=int, nargs="+", default=None)
    s.add_argument("--out", default="runs/overlap.csv")
    s.set_defaults(func=cmd_sweep)
    return p


def _fail(exc, code):
    record = {"error": type(exc).__name__, "code": code, "message": str(exc)}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except MMLegoError as exc:
        return _fail(exc, 1)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except NumericError as exc:
        return _fail(exc, 3)
    except MMLegoError as exc:
        return _fail(exc, exc.code)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(exc, 2)
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
