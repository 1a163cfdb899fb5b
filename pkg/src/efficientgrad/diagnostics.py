"""Angle and distribution measurements for training-time error signals."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .feedback import UndefinedAngleError, angle_to_bp
from .network import ForwardTrace, Network, backward_pass

__all__ = [
    "AngleRecord",
    "GradHistogram",
    "shadow_bp_pass",
    "record_angles",
    "record_histogram",
    "histogram_edges",
    "write_angles_csv",
    "write_histogram_csv",
]

ANGLE_COLUMNS = ("epoch", "step", "layer", "angle_deg")


@dataclass(frozen=True)
class AngleRecord:
    epoch: int
    step: int
    layer: int
    angle_deg: float | None

    def __post_init__(self):
        if self.angle_deg is not None and not 0.0 <= self.angle_deg <= 180.0:
            raise ValueError(f"angle out of range: {self.angle_deg}")


@dataclass
class GradHistogram:
    """Counts over fixed ``edges`` plus one overflow bin at each end.

    ``counts[0]`` holds values below ``edges[0]``, ``counts[-1]`` values at
    or above ``edges[-1]``; inner bins are half-open ``[lo, hi)``.
    """

    epoch: int
    layer: int
    edges: np.ndarray
    counts: np.ndarray

    def rows(self) -> list[tuple[float, float, int]]:
        lo = np.concatenate([[-math.inf], self.edges])
        hi = np.concatenate([self.edges, [math.inf]])
        return [(float(a), float(b), int(c)) for a, b, c in zip(lo, hi, self.counts)]


def shadow_bp_pass(net: Network, trace: ForwardTrace) -> dict[int, np.ndarray]:
    """Exact back-propagated error at each weighted layer's output.

    Reads ``net`` and ``trace`` only; no parameters, buffers, momentum or
    random streams are touched.
    """
    deltas, _ = backward_pass(net, trace)
    return {i: deltas[i] for i in net.weighted_layers()}


def record_angles(
    deltas: dict[int, np.ndarray],
    reference: dict[int, np.ndarray],
    epoch: int = 0,
    step: int = 0,
) -> list[AngleRecord]:
    if set(deltas) != set(reference):
        raise ValueError(f"layer sets differ: {sorted(deltas)} vs {sorted(reference)}")
    out = []
    for layer in sorted(deltas):
        try:
            angle = angle_to_bp(deltas[layer], reference[layer])
        except UndefinedAngleError:
            angle = None
        out.append(AngleRecord(epoch, step, layer, angle))
    return out


def histogram_edges(delta: np.ndarray, bins: int, width_sigmas: float = 5.0) -> np.ndarray:
    """Symmetric edges spanning +-``width_sigmas`` standard deviations of ``delta``."""
    s = float(np.std(delta, dtype=np.float64))
    half = width_sigmas * s if s > 0 else 1.0
    return np.linspace(-half, half, bins + 1)


def record_histogram(
    delta: np.ndarray,
    bins: int,
    edges: np.ndarray | None = None,
    epoch: int = 0,
    layer: int = 0,
) -> GradHistogram:
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    if edges is None:
        edges = histogram_edges(delta, bins)
    edges = np.asarray(edges, dtype=np.float64)
    if edges.shape != (bins + 1,) or np.any(np.diff(edges) <= 0):
        raise ValueError("edges must be strictly increasing with bins + 1 entries")
    idx = np.searchsorted(edges, np.asarray(delta, dtype=np.float64).ravel(), side="right")
    counts = np.bincount(idx, minlength=bins + 2)
    return GradHistogram(epoch, layer, edges, counts)


def write_angles_csv(records: list[AngleRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ANGLE_COLUMNS)
        for r in records:
            w.writerow([r.epoch, r.step, r.layer, "" if r.angle_deg is None else repr(r.angle_deg)])


def write_histogram_csv(hist: GradHistogram, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("bin_lo", "bin_hi", "count"))
        for lo, hi, c in hist.rows():
            w.writerow([repr(lo), repr(hi), c])
