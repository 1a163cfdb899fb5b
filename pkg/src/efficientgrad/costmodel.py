"""First-order MAC and DRAM-traffic accounting for the three training phases.

This is an analytic model, not a simulator. There is no tiling, banking or
interconnect contention, and reuse inside a layer is assumed perfect.
Activation and error traffic is counted once per producer/consumer hop.
Only the quantities that differ between modes are modeled with care:

* fetching the matrix that carries errors backward (full weights for exact
  back propagation, packed sign bits for sign-based feedback, nothing for
  fixed feedback kept on chip);
* MACs and error reads skipped because pruned errors are zero.

Ratios are reported against an exact back-propagation baseline:
``mac`` and ``traffic`` are baseline / candidate (speed-up and saving
factors, above 1 is better), ``energy`` is candidate / baseline (below 1 is
better).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .feedback import FeedbackMode
from .network import Network
from .pruner import PruneStats, expected_zero_fraction

__all__ = [
    "PHASES",
    "CostParams",
    "LayerShape",
    "LayerCost",
    "CostReport",
    "layer_shapes",
    "layer_macs",
    "feedback_fetch_bytes",
    "phase_traffic",
    "phase2_traffic",
    "estimate_cost",
    "apply_sparsity",
    "cost_ratios",
    "static_zero_fractions",
    "cost_summary",
]

PHASES = ("forward", "backward_error", "weight_grad")


@dataclass(frozen=True)
class CostParams:
    bytes_per_value: int = 4
    bits_per_sign: int = 1
    e_dram: float = 1.0
    e_mac: float = 1.0
    feedback_resident: bool = True
    run_steps: int = 1

    def __post_init__(self):
        for name in ("bytes_per_value", "bits_per_sign", "e_dram", "e_mac", "run_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class LayerShape:
    """Geometry of one weighted layer for a batch of ``batch`` samples.

    Fully-connected layers use ``k = h = w = 1``.
    """

    index: int
    kind: str
    batch: int
    cin: int
    cout: int
    k: int
    h_in: int = 1
    w_in: int = 1
    h_out: int = 1
    w_out: int = 1

    @property
    def weight_count(self) -> int:
        return self.cout * self.cin * self.k * self.k

    @property
    def in_elems(self) -> int:
        return self.batch * self.cin * self.h_in * self.w_in

    @property
    def out_elems(self) -> int:
        return self.batch * self.cout * self.h_out * self.w_out


def layer_shapes(net: Network, batch: int) -> list[LayerShape]:
    out = []
    for i in net.weighted_layers():
        l = net.layers[i]
        if l.kind == "Conv2d":
            c, h, w = net.layer_input_shape(i)
            _, ho, wo = net.shapes[i]
            out.append(LayerShape(i, "Conv2d", batch, c, l.out_channels, l.kernel_size, h, w, ho, wo))
        else:
            out.append(LayerShape(i, "Linear", batch, l.in_features, l.out_features, 1))
    return out


def layer_macs(layer: LayerShape, phase: str) -> int:
    """Multiply-accumulates for one phase; all three phases share the forward count."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    return layer.batch * layer.cout * layer.h_out * layer.w_out * layer.cin * layer.k * layer.k


def feedback_fetch_bytes(layer: LayerShape, mode: str, params: CostParams) -> float:
    """DRAM bytes needed to obtain the backward matrix for one step."""
    n = layer.weight_count
    full = n * params.bytes_per_value
    signs = math.ceil(n * params.bits_per_sign / 8)
    fixed = 0.0 if params.feedback_resident else full / params.run_steps
    if mode == "bp":
        return float(full)
    if mode == "fa":
        return fixed
    if mode == "signsym":
        return signs + fixed
    if mode == "binarysign":
        return float(signs)
    raise ValueError(f"unknown feedback mode {mode!r}")


def phase_traffic(layer: LayerShape, phase: str, mode: str, params: CostParams, zero_fraction: float = 0.0) -> float:
    b = params.bytes_per_value
    keep = 1.0 - zero_fraction
    if phase == "forward":
        return float((layer.weight_count + layer.in_elems + layer.out_elems) * b)
    if phase == "backward_error":
        return feedback_fetch_bytes(layer, mode, params) + layer.out_elems * b * keep + layer.in_elems * b
    if phase == "weight_grad":
        return layer.in_elems * b + layer.out_elems * b * keep + 2 * layer.weight_count * b
    raise ValueError(f"unknown phase {phase!r}")


def phase2_traffic(layer: LayerShape, mode: str, params: CostParams, zero_fraction: float = 0.0) -> float:
    return phase_traffic(layer, "backward_error", mode, params, zero_fraction)


@dataclass
class LayerCost:
    shape: LayerShape
    mode: str
    zero_fraction: float
    macs_total: dict[str, int]
    macs_effective: dict[str, float]
    dram_bytes: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "layer": self.shape.index,
            "kind": self.shape.kind,
            "mode": self.mode,
            "zero_fraction": self.zero_fraction,
            "phases": {
                p: {
                    "macs_total": self.macs_total[p],
                    "macs_effective": self.macs_effective[p],
                    "dram_bytes": self.dram_bytes[p],
                }
                for p in PHASES
            },
        }


@dataclass
class CostReport:
    layers: list[LayerCost]
    params: CostParams = field(default_factory=CostParams)

    def total(self, what: str) -> float:
        return sum(sum(getattr(l, what).values()) for l in self.layers)

    @property
    def energy(self) -> float:
        return self.params.e_dram * self.total("dram_bytes") + self.params.e_mac * self.total("macs_effective")

    def totals(self) -> dict:
        return {
            "macs_total": self.total("macs_total"),
            "macs_effective": self.total("macs_effective"),
            "dram_bytes": self.total("dram_bytes"),
            "energy": self.energy,
        }


def _layer_cost(shape: LayerShape, mode: str, params: CostParams, z: float) -> LayerCost:
    if not 0.0 <= z <= 1.0:
        raise ValueError(f"zero fraction must be in [0, 1], got {z}")
    total = {p: layer_macs(shape, p) for p in PHASES}
    eff = {p: float(total[p]) if p == "forward" else total[p] * (1.0 - z) for p in PHASES}
    traffic = {p: phase_traffic(shape, p, mode, params, z) for p in PHASES}
    return LayerCost(shape, mode, z, total, eff, traffic)


def _mode_of(feedback: FeedbackMode | str, index: int) -> str:
    return feedback if isinstance(feedback, str) else feedback.for_layer(index)


def estimate_cost(
    shapes: list[LayerShape],
    feedback: FeedbackMode | str = "bp",
    params: CostParams | None = None,
    zero_fractions: dict[int, float] | None = None,
) -> CostReport:
    params = params or CostParams()
    zero_fractions = zero_fractions or {}
    return CostReport(
        [_layer_cost(s, _mode_of(feedback, s.index), params, zero_fractions.get(s.index, 0.0)) for s in shapes],
        params,
    )


def apply_sparsity(cost: CostReport, stats: dict[int, PruneStats | float]) -> CostReport:
    """Recompute ``cost`` with per-layer zero fractions taken from ``stats``."""
    layers = []
    for lc in cost.layers:
        s = stats.get(lc.shape.index)
        z = lc.zero_fraction if s is None else (s.realized_zero_fraction if isinstance(s, PruneStats) else float(s))
        layers.append(_layer_cost(lc.shape, lc.mode, cost.params, z))
    return CostReport(layers, cost.params)


def cost_ratios(cost: CostReport, baseline: CostReport) -> dict[str, float]:
    return {
        "mac": baseline.total("macs_effective") / cost.total("macs_effective"),
        "traffic": baseline.total("dram_bytes") / cost.total("dram_bytes"),
        "energy": cost.energy / baseline.energy,
    }


def static_zero_fractions(shapes: list[LayerShape], rate: float, enabled: bool = True) -> dict[int, float]:
    """Expected zero fractions under Gaussian errors; the topmost layer is never pruned."""
    if not enabled or rate == 0 or not shapes:
        return {}
    z = expected_zero_fraction(rate)
    top = max(s.index for s in shapes)
    return {s.index: z for s in shapes if s.index != top}


def cost_summary(cost: CostReport, baseline: CostReport) -> dict:
    """JSON-ready block with per-layer tallies, totals and ratios."""
    return {
        "params": dataclasses.asdict(cost.params),
        "layers": [l.to_dict() for l in cost.layers],
        "totals": cost.totals(),
        "baseline_totals": baseline.totals(),
        "ratios": cost_ratios(cost, baseline),
    }
