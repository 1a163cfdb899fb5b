"""Command-line entry point: ``efficientgrad {train,compare,cost,eval}``.

Exit codes: 0 on success, 2 on configuration or input errors, 3 when
training diverges.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import tensor
from .config import ConfigError, RunConfig, load_datasets, load_run_config
from .costmodel import cost_summary, estimate_cost, layer_shapes, static_zero_fractions
from .diagnostics import write_angles_csv, write_histogram_csv
from .network import CheckpointError, build_network, load_checkpoint, save_checkpoint
from .pruner import PruneStats
from .trainer import COMPARE_MODES, DivergedError, TrainReport, compare_modes, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--threads", type=int, help="kernel worker threads (results do not depend on it)")
    p.add_argument("--out-dir", dest="out_dir", help="run directory; every artifact is written inside it")
    p.add_argument("--subset", type=int, help="stratified training subset size")
    return p


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags()
    parser = argparse.ArgumentParser(prog="efficientgrad", description=__doc__.splitlines()[0], parents=[g])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[g], help="train one configuration")
    c = sub.add_parser("compare", parents=[g], help="train several feedback modes from one seed")
    c.add_argument("--modes", default="bp,fa,signsym,signsym_prune",
                   help=f"comma-separated subset of {','.join(COMPARE_MODES)}")
    k = sub.add_parser("cost", parents=[g], help="analytic cost report without training")
    k.add_argument("--from-run", help="run directory whose measured sparsity replaces the Gaussian estimate")
    e = sub.add_parser("eval", parents=[g], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    return parser


def _load(args) -> RunConfig:
    config = getattr(args, "config", None)
    if not config:
        raise ConfigError("--config is required")
    overrides = {k: getattr(args, k, None) for k in ("seed", "threads", "out_dir", "subset")}
    cfg = load_run_config(config, overrides)
    tensor.set_num_threads(cfg.threads)
    return cfg


def _run_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_zero_fractions(report: TrainReport) -> dict[int, float]:
    total: dict[int, PruneStats] = {}
    for epoch_stats in report.prune_stats:
        for i, s in epoch_stats.items():
            total[i] = total[i] + s if i in total else s
    return {i: s.realized_zero_fraction for i, s in total.items()}


def _cost_block(cfg: RunConfig, zero_fractions: dict[int, float]) -> dict:
    net = build_network(cfg.network, cfg.seed)
    shapes = layer_shapes(net, cfg.train.batch_size)
    cost = estimate_cost(shapes, cfg.train.feedback, cfg.train.cost, zero_fractions)
    base = estimate_cost(shapes, "bp", cfg.train.cost)
    return cost_summary(cost, base)


def cmd_train(args) -> int:
    cfg = _load(args)
    train_ds, val_ds = load_datasets(cfg)
    run = _run_dir(cfg)
    _write_json(run / "config.resolved.json", cfg.resolved())
    net = build_network(cfg.network, cfg.seed)
    ckpt = run / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    metrics = open(run / "metrics.jsonl", "w")

    def on_epoch(rec):
        metrics.write(rec.to_json() + "\n")
        metrics.flush()

    try:
        report = train(net, train_ds, cfg.train, val=val_ds, checkpoint_dir=ckpt, on_epoch=on_epoch)
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        metrics.close()
    save_checkpoint(net, ckpt / "final.efgd")
    write_angles_csv(report.angles, run / "angles.csv")
    for h in report.histograms:
        write_histogram_csv(h, run / f"hist_{h.layer}_{h.epoch}.csv")
    _write_json(run / "cost.json", _cost_block(cfg, _run_zero_fractions(report)))
    last = report.epochs[-1] if report.epochs else None
    if last is not None:
        print(json.dumps({"epochs": len(report.epochs), "train_loss": last.train_loss,
                          "train_acc": last.train_acc, "val_acc": last.val_acc}))
    return EXIT_OK


def cmd_compare(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    unknown = [m for m in modes if m not in COMPARE_MODES]
    if unknown or not modes:
        raise ConfigError(f"unknown modes {unknown}; expected a subset of {COMPARE_MODES}")
    cfg = _load(args)
    train_ds, val_ds = load_datasets(cfg)
    run = _run_dir(cfg)
    _write_json(run / "config.resolved.json", cfg.resolved())

    def on_report(mode, report):
        d = run / mode
        d.mkdir(exist_ok=True)
        (d / "metrics.jsonl").write_text("".join(line + "\n" for line in report.metrics_lines()))

    try:
        cmp = compare_modes(train_ds, cfg.train, modes, cfg.network, val=val_ds, on_report=on_report)
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    with open(run / "compare.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", *modes])
        for row in cmp.table():
            w.writerow([row[0], *(repr(v) for v in row[1:])])
    return EXIT_OK


def _zero_fractions_from_run(run_dir: Path) -> dict[int, float]:
    path = run_dir / "metrics.jsonl"
    if not path.is_file():
        raise ConfigError(f"no metrics.jsonl in {run_dir}")
    sums: dict[int, list[float]] = {}
    for line in path.read_text().splitlines():
        for k, v in json.loads(line).get("sparsity", {}).items():
            sums.setdefault(int(k), []).append(v)
    return {k: sum(v) / len(v) for k, v in sums.items()}


def cmd_cost(args) -> int:
    cfg = _load(args)
    if args.from_run:
        zf = _zero_fractions_from_run(Path(args.from_run))
    else:
        net = build_network(cfg.network, cfg.seed)
        p = cfg.train.prune
        zf = static_zero_fractions(layer_shapes(net, cfg.train.batch_size), p.rate, p.enabled)
    block = _cost_block(cfg, zf)
    run = _run_dir(cfg)
    _write_json(run / "cost.json", block)
    print(json.dumps(block["ratios"]))
    return EXIT_OK


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        net = load_checkpoint(path)
    except CheckpointError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = _load(args)
    train_ds, val_ds = load_datasets(cfg)
    loss, acc = evaluate(net, val_ds if val_ds is not None else train_ds)
    print(json.dumps({"loss": loss, "accuracy": acc}))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "cost": cmd_cost, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
