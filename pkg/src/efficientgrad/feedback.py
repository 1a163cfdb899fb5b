"""Matrices that carry the error backward through weighted layers.

Four modes are supported:

``bp``
    the layer's current weights (exact back propagation);
``fa``
    a fixed random matrix drawn once at initialization;
``signsym``
    the signs of the current weights times fixed random magnitudes;
``binarysign``
    the signs of the current weights times a per-layer constant.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .network import Network, kaiming_uniform
from .stats import keyed_generator

__all__ = [
    "MODES",
    "FeedbackError",
    "FeedbackMode",
    "FeedbackState",
    "UndefinedAngleError",
    "init_feedback",
    "modulatory_matrix",
    "angle_to_bp",
]

MODES = ("bp", "fa", "signsym", "binarysign")

_FEEDBACK_DOMAIN = 1


class FeedbackError(ValueError):
    pass


class UndefinedAngleError(ValueError):
    """One of the vectors has zero norm."""


@dataclass(frozen=True)
class FeedbackMode:
    mode: str = "signsym"
    overrides: dict[int, str] = field(default_factory=dict)
    freeze_signs: bool = False

    def __post_init__(self):
        for m in (self.mode, *self.overrides.values()):
            if m not in MODES:
                raise FeedbackError(f"unknown feedback mode {m!r}; expected one of {MODES}")

    def for_layer(self, index: int) -> str:
        return self.overrides.get(index, self.mode)


@dataclass
class FeedbackState:
    mode: FeedbackMode
    seed: int
    signed: dict[int, np.ndarray]
    magnitude: dict[int, np.ndarray]
    binary_scale: dict[int, float]
    frozen_sign: dict[int, np.ndarray]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for i in sorted(self.magnitude):
            h.update(self.signed[i].tobytes())
            h.update(self.magnitude[i].tobytes())
        return h.hexdigest()


def init_feedback(net: Network, mode: FeedbackMode | str = "signsym", seed: int | None = None) -> FeedbackState:
    """Draw the fixed feedback matrices for every weighted layer.

    Draws come from the weight-initialization distribution on a stream
    separate from the one used for the weights, so re-initializing the
    weights leaves the feedback untouched.
    """
    if isinstance(mode, str):
        mode = FeedbackMode(mode)
    seed = net.seed if seed is None else int(seed)
    weighted = net.weighted_layers()
    bad = sorted(set(mode.overrides) - set(weighted))
    if bad:
        raise FeedbackError(f"overrides reference unweighted layers {bad}")
    signed, magnitude, scale, frozen = {}, {}, {}, {}
    for i in weighted:
        w = net.params[i]["weight"]
        b = kaiming_uniform(w.shape, keyed_generator(seed, _FEEDBACK_DOMAIN, i)).astype(w.dtype)
        b.setflags(write=False)
        signed[i] = b
        mag = np.abs(b)
        mag.setflags(write=False)
        magnitude[i] = mag
        fan_in = int(np.prod(w.shape[1:]))
        scale[i] = math.sqrt(2.0 / fan_in)
        fs = np.sign(w)
        fs.setflags(write=False)
        frozen[i] = fs
    return FeedbackState(mode, seed, signed, magnitude, scale, frozen)


def modulatory_matrix(state: FeedbackState | None, layer_index: int, w_current: np.ndarray) -> np.ndarray:
    """Matrix used in place of ``w_current`` when propagating the error backward."""
    if state is None:
        return w_current
    if layer_index not in state.magnitude:
        raise FeedbackError(f"layer {layer_index} is not a weighted layer")
    mode = state.mode.for_layer(layer_index)
    if mode == "bp":
        return w_current
    if mode == "fa":
        return state.signed[layer_index]
    sign = state.frozen_sign[layer_index] if state.mode.freeze_signs else np.sign(w_current)
    if mode == "signsym":
        return sign * state.magnitude[layer_index]
    return sign * w_current.dtype.type(state.binary_scale[layer_index])


def angle_to_bp(delta_fa: np.ndarray, delta_bp: np.ndarray) -> float:
    """Angle in degrees between two error tensors, flattened."""
    a = np.asarray(delta_fa, dtype=np.float64).ravel()
    b = np.asarray(delta_bp, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {np.shape(delta_fa)} vs {np.shape(delta_bp)}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedAngleError("angle undefined for a zero-norm error tensor")
    # half-angle form stays accurate near 0 and 180, where acos does not
    ua, ub = a / na, b / nb
    t = 2.0 * math.atan2(float(np.linalg.norm(ua - ub)), float(np.linalg.norm(ua + ub)))
    return min(180.0, max(0.0, math.degrees(t)))
