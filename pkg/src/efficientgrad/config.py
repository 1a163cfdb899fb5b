"""Run configuration: JSON file plus command-line overrides, validated up front."""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .costmodel import CostParams
from .data import Dataset, load_cifar10, load_idx, load_mnist, standardize, stratified_subset, synth_blobs
from .feedback import FeedbackError, FeedbackMode
from .network import BuildError, NetworkConfig, build_network
from .pruner import PruneConfig, PruneConfigError
from .trainer import ConfigError, TrainConfig

__all__ = ["RunConfig", "ConfigError", "load_run_config", "load_datasets", "DATA_KINDS"]

DATA_KINDS = ("synth_blobs", "mnist", "idx", "cifar10")

_TRAIN_KEYS = {
    "batch_size", "epochs", "lr", "momentum", "schedule", "milestones", "decay",
    "eval_every", "angle_every", "histogram_bins", "checkpoint_every", "record_wall_time",
}
_DATA_DEFAULTS = {
    "kind": "synth_blobs",
    "classes": 2,
    "samples": 64,
    "dims": 8,
    "separation": 6.0,
    "val_samples": 0,
    "path": None,
    "images": None,
    "labels": None,
    "val_images": None,
    "val_labels": None,
    "train_files": [],
    "val_files": [],
    "subset": None,
    "val_subset": None,
}
_TOP_KEYS = {"seed", "out_dir", "threads", "network", "train", "feedback", "prune", "cost", "data"}


def _check_keys(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


@dataclass
class RunConfig:
    network: NetworkConfig
    train: TrainConfig
    data: dict
    out_dir: str = "runs/default"
    threads: int = 1
    raw: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.train.seed

    def resolved(self) -> dict:
        """Fully expanded config; feeding it back in reproduces the run."""
        t = self.train
        return {
            "seed": t.seed,
            "out_dir": self.out_dir,
            "threads": self.threads,
            "network": self.network.to_dict(),
            "train": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in dataclasses.asdict(t).items() if k in _TRAIN_KEYS},
            "feedback": {
                "mode": t.feedback.mode,
                "overrides": {str(k): v for k, v in sorted(t.feedback.overrides.items())},
                "freeze_signs": t.feedback.freeze_signs,
            },
            "prune": dataclasses.asdict(t.prune),
            "cost": dataclasses.asdict(t.cost),
            "data": dict(self.data),
        }


def parse_run_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    raw = copy.deepcopy(raw)
    _check_keys(raw, _TOP_KEYS, "config")
    try:
        if "network" not in raw:
            raise ConfigError("config: 'network' section is required")
        net_cfg = NetworkConfig.from_dict(raw["network"])
        build_network(net_cfg, 0)  # validates the layer chain

        train_raw = raw.get("train", {})
        _check_keys(train_raw, _TRAIN_KEYS, "train")
        if "milestones" in train_raw:
            train_raw["milestones"] = tuple(train_raw["milestones"])

        fb_raw = raw.get("feedback", {})
        _check_keys(fb_raw, {"mode", "overrides", "freeze_signs"}, "feedback")
        overrides = {int(k): v for k, v in fb_raw.get("overrides", {}).items()}
        feedback = FeedbackMode(fb_raw.get("mode", "bp"), overrides, bool(fb_raw.get("freeze_signs", False)))
        bad = sorted(set(overrides) - {i for i, l in enumerate(net_cfg.layers) if l.weighted})
        if bad:
            raise ConfigError(f"feedback.overrides: layers {bad} are not weighted layers")

        pr_raw = raw.get("prune", {})
        _check_keys(pr_raw, {f.name for f in dataclasses.fields(PruneConfig)}, "prune")
        prune = PruneConfig(**pr_raw)

        cost_raw = raw.get("cost", {})
        _check_keys(cost_raw, {f.name for f in dataclasses.fields(CostParams)}, "cost")
        cost = CostParams(**cost_raw)

        train = TrainConfig(**train_raw, feedback=feedback, prune=prune, cost=cost, seed=int(raw.get("seed", 0)))

        data = dict(_DATA_DEFAULTS)
        data_raw = raw.get("data", {})
        _check_keys(data_raw, _DATA_DEFAULTS, "data")
        data.update(data_raw)
        if data["kind"] not in DATA_KINDS:
            raise ConfigError(f"data.kind must be one of {DATA_KINDS}, got {data['kind']!r}")
        for key in ("path", "images", "labels", "val_images", "val_labels"):
            if data[key] is not None and base_dir is not None:
                data[key] = str((base_dir / data[key]).resolve())
        for key in ("train_files", "val_files"):
            if base_dir is not None:
                data[key] = [str((base_dir / p).resolve()) for p in data[key]]
        if isinstance(data["dims"], list):
            data["dims"] = list(data["dims"])

        threads = int(raw.get("threads", 1))
        if threads < 1:
            raise ConfigError("threads must be >= 1")
    except (BuildError, FeedbackError, PruneConfigError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return RunConfig(net_cfg, train, data, str(raw.get("out_dir", "runs/default")), threads, raw)


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config file and apply top-level or ``data.subset`` overrides."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k == "subset":
            raw.setdefault("data", {})["subset"] = v
        else:
            raw[k] = v
    return parse_run_config(raw, p.parent)


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset | None]:
    """Build the training set and optional validation set described by ``cfg.data``.

    The validation split is standardized with the training split's constants.
    """
    d = cfg.data
    seed = cfg.seed
    kind = d["kind"]
    val = None
    try:
        if kind == "synth_blobs":
            dims = tuple(d["dims"]) if isinstance(d["dims"], list) else int(d["dims"])
            n, nv = int(d["samples"]), int(d["val_samples"])
            full = synth_blobs(d["classes"], n + nv, dims, seed, d["separation"])
            train = full.subset(slice(0, n)) if nv else full
            if nv:
                val = full.subset(slice(n, None))
                val.split = "val"
        elif kind == "mnist":
            if d["path"] is None:
                raise ConfigError("data.path is required for mnist")
            train = load_mnist(d["path"], "train", standardized=False)
            val = load_mnist(d["path"], "t10k", standardized=False)
        elif kind == "idx":
            if d["images"] is None or d["labels"] is None:
                raise ConfigError("data.images and data.labels are required for idx")
            train = load_idx(d["images"], d["labels"], standardized=False)
            if d["val_images"] and d["val_labels"]:
                val = load_idx(d["val_images"], d["val_labels"], standardized=False, split="val")
        else:
            if not d["train_files"]:
                raise ConfigError("data.train_files is required for cifar10")
            train = load_cifar10(d["train_files"], standardized=False)
            if d["val_files"]:
                val = load_cifar10(d["val_files"], standardized=False, split="val")
    except FileNotFoundError as exc:
        raise ConfigError(f"data file not found: {exc}") from None
    if d["subset"]:
        train = stratified_subset(train, int(d["subset"]), seed)
    if val is not None and d["val_subset"]:
        val = stratified_subset(val, int(d["val_subset"]), seed)
    if kind != "synth_blobs":
        train = standardize(train)
        if val is not None:
            val = standardize(val, train.metadata["channel_mean"], train.metadata["channel_std"])
    return train, val
