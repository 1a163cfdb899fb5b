"""Mini-batch training loop: forward, feedback-driven backward, SGD update.

Each step runs three phases in order. The forward pass caches activations.
The backward pass walks errors down through the feedback matrices and
prunes them. Only then are parameter gradients computed from the (pruned)
errors and applied with momentum SGD. No parameter changes before every
gradient of the step exists.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .costmodel import CostParams, cost_ratios, estimate_cost, layer_shapes
from .data import Dataset
from .diagnostics import AngleRecord, GradHistogram, histogram_edges, record_angles, record_histogram, shadow_bp_pass
from .feedback import FeedbackMode, FeedbackState, init_feedback, modulatory_matrix
from .network import (
    Network,
    NetworkConfig,
    NumericError,
    backward_pass,
    build_network,
    forward,
    save_checkpoint,
    sgd_step,
    weight_grad,
)
from .pruner import PruneConfig, Pruner, PruneStats
from .stats import keyed_generator

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainReport",
    "DivergedError",
    "ConfigError",
    "train",
    "evaluate",
    "compare_modes",
    "Comparison",
    "COMPARE_MODES",
]

_SHUFFLE_DOMAIN = 3
EVAL_BATCH = 256

COMPARE_MODES = ("bp", "fa", "signsym", "binarysign", "bp_prune", "fa_prune", "signsym_prune", "binarysign_prune")


class ConfigError(ValueError):
    pass


class DivergedError(RuntimeError):
    def __init__(self, message: str, epoch: int, step: int, layer_index: int | None = None):
        super().__init__(message)
        self.epoch, self.step, self.layer_index = epoch, step, layer_index


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 1
    lr: float = 0.05
    momentum: float = 0.9
    schedule: str = "constant"
    milestones: tuple[int, ...] = ()
    decay: float = 0.1
    feedback: FeedbackMode = field(default_factory=lambda: FeedbackMode("bp"))
    prune: PruneConfig = field(default_factory=PruneConfig)
    cost: CostParams = field(default_factory=CostParams)
    seed: int = 0
    eval_every: int = 1
    angle_every: int = 0
    histogram_bins: int = 0
    checkpoint_every: int = 0
    record_wall_time: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.schedule not in ("constant", "step"):
            raise ConfigError(f"schedule must be 'constant' or 'step', got {self.schedule!r}")
        for name in ("eval_every", "angle_every", "histogram_bins", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.histogram_bins == 1:
            raise ConfigError("histogram_bins must be 0 (off) or >= 2")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; step decay multiplies by ``decay`` at each milestone reached."""
        if self.schedule == "constant":
            return self.lr
        return self.lr * self.decay ** sum(1 for m in self.milestones if epoch > m)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float | None
    angles: dict[int, float | None]
    sparsity: dict[int, float]
    cost: dict[str, float]
    wall_s: float | None

    def to_json(self) -> str:
        d = {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "val_acc": self.val_acc,
            "angles": {str(k): v for k, v in self.angles.items()},
            "sparsity": {str(k): v for k, v in self.sparsity.items()},
            "cost": self.cost,
            "wall_s": self.wall_s,
        }
        return json.dumps(d, sort_keys=False)


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    angles: list[AngleRecord] = field(default_factory=list)
    histograms: list[GradHistogram] = field(default_factory=list)
    prune_stats: list[dict[int, PruneStats]] = field(default_factory=list)
    steps: int = 0

    def metrics_lines(self) -> list[str]:
        return [e.to_json() for e in self.epochs]

    def comparable(self) -> dict:
        """Everything but wall-clock time, for determinism checks."""
        d = asdict(self)
        for e in d["epochs"]:
            e["wall_s"] = None
        return d


def _batches(n: int, size: int, order: np.ndarray):
    for s in range(0, n, size):
        yield order[s : s + size]


def evaluate(net: Network, dataset: Dataset, batch_size: int = EVAL_BATCH) -> tuple[float, float]:
    """Eval-mode loss and accuracy; ties go to the lowest class index."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    for s in range(0, n, batch_size):
        x = dataset.images[s : s + batch_size]
        y = dataset.labels[s : s + batch_size]
        loss, _, pred = forward(net, x, y, training=False)
        total_loss += loss * len(y)
        correct += int(np.count_nonzero(np.argmax(pred, axis=1) == y))
    return total_loss / n, correct / n


def _mean_or_none(vals: list[float]) -> float | None:
    return float(np.mean(vals)) if vals else None


def train(
    net: Network,
    dataset: Dataset,
    cfg: TrainConfig,
    val: Dataset | None = None,
    feedback: FeedbackState | None = None,
    checkpoint_dir: str | Path | None = None,
    on_weight_grad: Callable[[int, np.ndarray], None] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainReport:
    """Train ``net`` in place and return per-epoch metrics.

    ``on_weight_grad(layer, delta)`` is called with the exact error array
    each parameter gradient is computed from. ``on_epoch`` receives each
    finished epoch record.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if tuple(dataset.images.shape[1:]) != net.input_shape:
        raise ValueError(f"dataset samples {dataset.images.shape[1:]} do not match network input {net.input_shape}")
    if feedback is None:
        feedback = init_feedback(net, cfg.feedback, cfg.seed)
    prune_cfg = replace(cfg.prune, seed=cfg.seed) if cfg.prune.seed is None else cfg.prune
    pruner = Pruner(prune_cfg)
    pruning = prune_cfg.enabled and prune_cfg.rate > 0
    weighted = net.weighted_layers()
    shapes = layer_shapes(net, cfg.batch_size)
    bp_cost = estimate_cost(shapes, "bp", cfg.cost)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    def modulatory(i, w):
        return modulatory_matrix(feedback, i, w)

    def prune(i, d):
        return pruner(i, step, d)

    report = TrainReport()
    hist_edges: dict[int, np.ndarray] = {}
    x_all = dataset.images.astype(net.dtype, copy=False)
    y_all = dataset.labels
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = keyed_generator(cfg.seed, _SHUFFLE_DOMAIN, epoch).permutation(n)
        loss_sum, correct = 0.0, 0
        epoch_angles: list[AngleRecord] = []
        epoch_stats: dict[int, PruneStats] = {}
        for b, idx in enumerate(_batches(n, cfg.batch_size, order)):
            xb, yb = x_all[idx], y_all[idx]
            try:
                loss, trace, pred = forward(net, xb, yb, training=True)
            except NumericError as exc:
                raise DivergedError(f"diverged at epoch {epoch}, step {step}: {exc}", epoch, step, exc.layer_index) from exc
            loss_sum += loss * len(idx)
            correct += int(np.count_nonzero(np.argmax(pred, axis=1) == yb))

            # phase 2
            deltas, stats = backward_pass(net, trace, modulatory, prune if pruning else None)
            for i, s in stats.items():
                epoch_stats[i] = epoch_stats[i] + s if i in epoch_stats else s

            sample = (step % cfg.angle_every == 0) if cfg.angle_every else (b == steps_per_epoch - 1)
            if sample:
                ref = shadow_bp_pass(net, trace)
                epoch_angles.extend(record_angles({i: deltas[i] for i in weighted}, ref, epoch, step))
                if cfg.histogram_bins:
                    for i in weighted:
                        if i not in hist_edges:
                            hist_edges[i] = histogram_edges(deltas[i], cfg.histogram_bins)
                        report.histograms.append(record_histogram(deltas[i], cfg.histogram_bins, hist_edges[i], epoch, i))

            # phase 3
            grads = [{} for _ in net.layers]
            for i in range(len(net.layers) - 1, -1, -1):
                if net.params[i]:
                    if on_weight_grad is not None:
                        on_weight_grad(i, deltas[i])
                    grads[i] = weight_grad(net, i, deltas[i], trace)
            del trace
            sgd_step(net, grads, lr, cfg.momentum)
            step += 1

        val_acc = None
        if val is not None and cfg.eval_every and epoch % cfg.eval_every == 0:
            val_acc = evaluate(net, val)[1]
        angles = {}
        for i in weighted:
            vals = [r.angle_deg for r in epoch_angles if r.layer == i and r.angle_deg is not None]
            angles[i] = _mean_or_none(vals)
        sparsity = {i: epoch_stats[i].realized_zero_fraction for i in sorted(epoch_stats)}
        cost = estimate_cost(shapes, cfg.feedback, cfg.cost, sparsity)
        rec = EpochRecord(
            epoch,
            loss_sum / n,
            correct / n,
            val_acc,
            angles,
            sparsity,
            cost_ratios(cost, bp_cost),
            time.perf_counter() - t0 if cfg.record_wall_time else None,
        )
        report.epochs.append(rec)
        report.angles.extend(epoch_angles)
        report.prune_stats.append(epoch_stats)
        if checkpoint_dir is not None and cfg.checkpoint_every and (
            epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs
        ):
            save_checkpoint(net, Path(checkpoint_dir) / f"epoch_{epoch:04d}.efgd")
        if on_epoch is not None:
            on_epoch(rec)
    report.steps = step
    return report


@dataclass
class Comparison:
    modes: list[str]
    reports: dict[str, TrainReport]

    def table(self) -> list[list]:
        """Rows of ``[epoch, acc(mode_1), ...]``; validation accuracy when available."""
        rows = []
        n_epochs = len(next(iter(self.reports.values())).epochs) if self.reports else 0
        for e in range(n_epochs):
            row: list = [e + 1]
            for m in self.modes:
                r = self.reports[m].epochs[e]
                row.append(r.val_acc if r.val_acc is not None else r.train_acc)
            rows.append(row)
        return rows


def mode_config(cfg: TrainConfig, mode: str) -> TrainConfig:
    """Derive the per-mode config used by :func:`compare_modes`."""
    if mode not in COMPARE_MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {COMPARE_MODES}")
    base, _, suffix = mode.partition("_")
    fb = FeedbackMode(base, dict(cfg.feedback.overrides), cfg.feedback.freeze_signs)
    if suffix:
        if cfg.prune.rate == 0:
            raise ConfigError(f"mode {mode!r} needs a positive pruning rate")
        pr = replace(cfg.prune, enabled=True)
    else:
        pr = replace(cfg.prune, enabled=False)
    return replace(cfg, feedback=fb, prune=pr)


def compare_modes(
    dataset: Dataset,
    cfg_base: TrainConfig,
    modes: list[str],
    net_config: NetworkConfig,
    val: Dataset | None = None,
    on_report: Callable[[str, TrainReport], None] | None = None,
) -> Comparison:
    """Train a freshly initialized network per mode from the same seed."""
    cfgs = {m: mode_config(cfg_base, m) for m in modes}
    reports = {}
    for m in modes:
        net = build_network(net_config, cfg_base.seed)
        reports[m] = train(net, dataset, cfgs[m], val=val)
        if on_report is not None:
            on_report(m, reports[m])
    return Comparison(list(modes), reports)
