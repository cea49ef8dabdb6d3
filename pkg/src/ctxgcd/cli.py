"""Command-line entry point: ``ctxgcd {gen,train,eval,mine,sweep}``."""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ABLATIONS, ExperimentConfig, parse_value
from .dataset import FORMATS, gen_gaussian_gcd, load_embeddings, save_embeddings
from .errors import ConfigError, GcdError, IoError, ParseError
from .evaluation import METRIC_FIELDS, gcd_accuracy
from .mining import k_reciprocal, knn, pseudo_labels
from .model import classify, embed, init_params, load_checkpoint, save_checkpoint
from .numeric import Rng
from .trainer import evaluate, train

log = logging.getLogger("ctxgcd")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_override("seed", args.seed)
    if getattr(args, "out", None):
        cfg = cfg.with_override("out_dir", args.out)
    if getattr(args, "data", None):
        cfg = cfg.with_override("data.path", args.data)
    if getattr(args, "format", None):
        cfg = cfg.with_override("data.format", args.format)
    if getattr(args, "ablate", None):
        cfg = cfg.with_ablation(args.ablate)
    overrides = []
    for item in getattr(args, "set", None) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.append((key, parse_value(val)))
    return cfg.with_overrides(overrides) if overrides else cfg


def make_dataset(cfg: ExperimentConfig):
    d = cfg.data
    if d.path:
        return load_embeddings(d.path, d.format)
    return gen_gaussian_gcd(
        d.n_classes, d.n_old, d.dim, d.n_per_class, d.class_sep, d.sigma, d.labeled_ratio, Rng(cfg.seed).split(100)
    )


def write_metrics(metrics, out_dir: Path):
    (out_dir / "metrics.json").write_text(metrics.to_json() + "\n")
    (out_dir / "metrics.csv").write_text(metrics.csv_row(header=True))


def run_experiment(cfg: ExperimentConfig, write: bool = True):
    ds = make_dataset(cfg)
    out = Path(cfg.out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
    params, _ = train(
        ds,
        cfg.train,
        log_path=out / "train_log.jsonl" if write else None,
        checkpoint_dir=out if write else None,
    )
    metrics = evaluate(params, ds, cfg.train.loss.tau_s)
    if write:
        save_checkpoint(params, out / "checkpoint.json")
        write_metrics(metrics, out)
    return params, metrics


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    fmt = args.format or cfg.data.format or "csv"
    ds = gen_gaussian_gcd(
        cfg.data.n_classes, cfg.data.n_old, cfg.data.dim, cfg.data.n_per_class,
        cfg.data.class_sep, cfg.data.sigma, cfg.data.labeled_ratio, Rng(cfg.seed).split(100),
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = save_embeddings(ds, out / f"dataset.{fmt}", fmt)
    cfg.save(out / "config.json")
    print(json.dumps({"path": str(path), "n": ds.n, "dim": ds.dim, "n_labeled": int(ds.labeled_mask.sum())}))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _, metrics = run_experiment(cfg)
    print(metrics.to_json())
    return 0


def _read_predictions(path: Path):
    if not path.is_file():
        raise IoError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"pred", "label"} <= set(reader.fieldnames):
            raise ParseError("predictions CSV needs a header with pred,label", 1)
        pred, label = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                pred.append(int(row["pred"]))
                label.append(int(row["label"]))
            except (TypeError, ValueError):
                raise ParseError("pred and label must be integers", lineno) from None
    return np.asarray(pred), np.asarray(label)


def cmd_eval(args) -> int:
    if args.predictions:
        if args.old_classes is None:
            raise ConfigError("--old-classes is required with --predictions")
        old = [int(c) for c in args.old_classes.split(",") if c.strip()]
        pred, truth = _read_predictions(Path(args.predictions))
        metrics = gcd_accuracy(pred, truth, old)
    else:
        if not (args.data and args.checkpoint):
            raise ConfigError("eval needs --predictions, or both --data and --checkpoint")
        ds = load_embeddings(args.data, args.format)
        params = load_checkpoint(args.checkpoint)
        metrics = evaluate(params, ds, args.tau_s)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(metrics, out)
    print(metrics.to_json())
    return 0


def cmd_mine(args) -> int:
    """Reciprocal graph of a dataset's embeddings as JSONL."""
    cfg = resolve_config(args)
    if not cfg.data.path:
        raise ConfigError("mine needs --data")
    ds = load_embeddings(cfg.data.path, cfg.data.format)
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
    else:
        params = init_params(
            ds.dim, ds.n_classes, cfg.train.model.encoder_dims, cfg.train.model.proj_dims, Rng(cfg.seed).split(0)
        )
    h, z = embed(params, ds.points)
    p = classify(params, h, cfg.train.loss.tau_s)
    pl = pseudo_labels(p, p)
    rec = k_reciprocal(knn(z, min(args.k_nn or cfg.train.k_nn, ds.n - 1)))
    lines = [
        json.dumps({"i": i, "reciprocal": sorted(int(j) for j in r), "pseudo_label": int(pl[i])}) for i, r in enumerate(rec)
    ]
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def parse_grid(items) -> list[tuple[str, list]]:
    grid = []
    for item in items:
        key, sep, vals = item.partition("=")
        if not sep or not vals:
            raise ConfigError(f"grid entry {item!r} must look like key=v1,v2")
        grid.append((key, [parse_value(v) for v in vals.split(",")]))
    return grid


def _sweep_point(payload):
    cfg_dict, overrides = payload
    cfg = ExperimentConfig.from_dict(cfg_dict)
    cfg = cfg.with_overrides(overrides)
    _, metrics = run_experiment(cfg, write=False)
    return metrics.to_dict()


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    grid = parse_grid(args.grid)
    for key, vals in grid:
        cfg.with_override(key, vals[0])  # validate keys up front
    keys = [k for k, _ in grid]
    points = [list(zip(keys, combo)) for combo in itertools.product(*(v for _, v in grid))]
    payloads = [(cfg.to_dict(), p) for p in points]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, payloads))
    else:
        results = [_sweep_point(p) for p in payloads]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys + list(METRIC_FIELDS))
    for point, res in zip(points, results):
        w.writerow([v for _, v in point] + [res[f] for f in METRIC_FIELDS])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    (out / "sweep.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    parser = argparse.ArgumentParser(prog="ctxgcd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset file")
    p.add_argument("--format", choices=FORMATS)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train and evaluate one configuration")
    p.add_argument("--data", help="embedding file to train on instead of synthetic data")
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--ablate", choices=sorted(ABLATIONS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="compute All/Old/New accuracy")
    p.add_argument("--predictions", help="CSV with pred,label columns")
    p.add_argument("--old-classes", help="comma-separated old class ids (with --predictions)")
    p.add_argument("--data", help="embedding file (with --checkpoint)")
    p.add_argument("--checkpoint")
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--tau-s", type=float, default=0.1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mine", parents=[common], help="emit the k-reciprocal graph as JSONL")
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--checkpoint")
    p.add_argument("--k-nn", type=int)
    p.add_argument("--output", help="JSONL path (default stdout)")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("sweep", parents=[common], help="grid over config fields, one CSV row per point")
    p.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2")
    p.add_argument("--ablate", choices=sorted(ABLATIONS))
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("GCD_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        if args.print_config:
            sys.stdout.write(resolve_config(args).to_json())
            return 0
        return args.func(args)
    except (GcdError, ValueError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        sys.stderr.write(json.dumps(err) + "\n")
        return 3 if isinstance(exc, OSError) else 2


if __name__ == "__main__":
    sys.exit(main())
