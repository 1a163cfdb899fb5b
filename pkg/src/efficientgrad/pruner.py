"""Stochastic error-gradient pruning with a Gaussian-quantile threshold.

Entries with ``|d| > tau`` pass unchanged. Entries inside the band are
either snapped to ``tau * sign(d)`` (when ``|d| >= r * tau``, ``r`` uniform
on [0, 1)) or zeroed, which keeps the expectation of every entry equal to
its original value. ``tau`` is chosen so that a fraction ``P`` of a
zero-mean Gaussian falls inside the band.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .stats import keyed_uniform, norm_pdf, norm_ppf

__all__ = [
    "PruneConfigError",
    "PruneConfig",
    "PruneStats",
    "Pruner",
    "compute_threshold",
    "stochastic_prune",
    "expected_zero_fraction",
]

SIGMA_SOURCES = ("per_tensor_batch", "running_ema")

_PRUNE_DOMAIN = 2


class PruneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PruneConfig:
    rate: float = 0.0
    enabled: bool = False
    sigma_source: str = "per_tensor_batch"
    ema_decay: float = 0.9
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise PruneConfigError(f"pruning rate must be in [0, 1), got {self.rate}")
        if self.sigma_source not in SIGMA_SOURCES:
            raise PruneConfigError(f"sigma_source must be one of {SIGMA_SOURCES}, got {self.sigma_source!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise PruneConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")


@dataclass
class PruneStats:
    tau: float
    n_total: int
    n_passed: int
    n_clamped: int
    n_zeroed: int

    @property
    def realized_zero_fraction(self) -> float:
        return self.n_zeroed / self.n_total if self.n_total else 0.0

    def __add__(self, other: "PruneStats") -> "PruneStats":
        return PruneStats(
            other.tau,
            self.n_total + other.n_total,
            self.n_passed + other.n_passed,
            self.n_clamped + other.n_clamped,
            self.n_zeroed + other.n_zeroed,
        )


def compute_threshold(rate: float, sigma: float) -> float:
    """Band half-width holding a fraction ``rate`` of N(0, sigma^2)."""
    if not 0.0 <= rate < 1.0:
        raise PruneConfigError(f"pruning rate must be in [0, 1), got {rate}")
    if sigma < 0:
        raise PruneConfigError(f"sigma must be non-negative, got {sigma}")
    return norm_ppf((1.0 + rate) / 2.0) * sigma


def stochastic_prune(delta: np.ndarray, tau: float, r) -> tuple[np.ndarray, PruneStats]:
    """Apply the three-case pruning rule elementwise.

    ``r`` is either an array of uniforms shaped like ``delta`` or a
    :class:`numpy.random.Generator` to draw them from.
    """
    if tau < 0:
        raise ValueError(f"threshold must be non-negative, got {tau}")
    delta = np.asarray(delta)
    n = delta.size
    if tau == 0:
        return delta.copy(), PruneStats(0.0, n, n, 0, 0)
    if isinstance(r, np.random.Generator):
        r = r.random(delta.shape)
    r = np.asarray(r)
    if r.shape != delta.shape:
        raise ValueError(f"random draws shaped {r.shape}, delta shaped {delta.shape}")
    mag = np.abs(delta)
    passed = mag > tau
    clamped = ~passed & (mag >= r * tau)
    t = delta.dtype.type(tau)
    out = np.where(passed, delta, np.where(clamped, np.copysign(t, delta), delta.dtype.type(0)))
    n_passed = int(np.count_nonzero(passed))
    n_clamped = int(np.count_nonzero(clamped))
    return out.astype(delta.dtype, copy=False), PruneStats(float(tau), n, n_passed, n_clamped, n - n_passed - n_clamped)


def expected_zero_fraction(rate: float) -> float:
    """Fraction of standard-normal errors zeroed at pruning rate ``rate``.

    Integrates ``phi(x) * (1 - |x| / tau)`` over the band ``|x| <= tau``.
    """
    if rate == 0:
        return 0.0
    tau = compute_threshold(rate, 1.0)
    val, _ = integrate.quad(lambda x: norm_pdf(x) * (1.0 - x / tau), 0.0, tau, epsabs=1e-10, epsrel=1e-10)
    return 2.0 * val


@dataclass
class Pruner:
    """Per-layer pruning state for one training run.

    Random draws are keyed by ``(seed, layer, step)``, so a given step
    prunes identically no matter how the work is scheduled.
    """

    config: PruneConfig
    sigma_ema: dict[int, float] = field(default_factory=dict)

    def sigma(self, layer: int, delta: np.ndarray) -> float:
        s = float(np.std(delta, dtype=np.float64))
        if self.config.sigma_source == "per_tensor_batch":
            return s
        prev = self.sigma_ema.get(layer)
        s = s if prev is None else self.config.ema_decay * prev + (1 - self.config.ema_decay) * s
        self.sigma_ema[layer] = s
        return s

    def __call__(self, layer: int, step: int, delta: np.ndarray) -> tuple[np.ndarray, PruneStats]:
        if not self.config.enabled or self.config.rate == 0:
            return delta, PruneStats(0.0, delta.size, delta.size, 0, 0)
        tau = compute_threshold(self.config.rate, self.sigma(layer, delta))
        r = keyed_uniform(self.config.seed or 0, _PRUNE_DOMAIN, layer, step, size=delta.shape)
        return stochastic_prune(delta, tau, r)
