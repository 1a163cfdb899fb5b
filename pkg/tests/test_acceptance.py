"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``. Criteria 5 and 6 need the MNIST IDX
files (see README) and are skipped with a reason when they are absent.
"""
import json
import math
import sys
import time

import numpy as np
import pytest

from efficientgrad.config import load_datasets, parse_run_config
from efficientgrad.costmodel import CostParams, cost_ratios, estimate_cost, layer_shapes, phase2_traffic, static_zero_fractions
from efficientgrad.cli import main as cli_main
from efficientgrad.network import build_network
from efficientgrad.pruner import PruneConfig, Pruner, compute_threshold, expected_zero_fraction, stochastic_prune
from efficientgrad.stats import norm_ppf
from efficientgrad.trainer import compare_modes, train
from helpers import analytic_grads, max_rel_err, numeric_grads, quantile_bisect

RATES = (0.5, 0.7, 0.9)

CNN_LAYERS = [
    {"kind": "Conv2d", "out_channels": 16, "kernel_size": 3, "pad": 1}, {"kind": "BatchNorm"}, {"kind": "ReLU"},
    {"kind": "MaxPool2d", "kernel_size": 2},
    {"kind": "Conv2d", "out_channels": 32, "kernel_size": 3, "pad": 1}, {"kind": "BatchNorm"}, {"kind": "ReLU"},
    {"kind": "MaxPool2d", "kernel_size": 2},
    {"kind": "Linear", "out_features": 10}, {"kind": "SoftmaxCrossEntropy"},
]


@pytest.fixture
def verdict(capsys):
    def report(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail

    return report


def test_criterion_1_exact_gradients(verdict):
    cfg = {"input_shape": [1, 6, 6], "dtype": "float64", "layers": [
        {"kind": "Conv2d", "out_channels": 4, "kernel_size": 3, "pad": 1}, {"kind": "BatchNorm"}, {"kind": "ReLU"},
        {"kind": "MaxPool2d", "kernel_size": 2}, {"kind": "Linear", "out_features": 5},
        {"kind": "SoftmaxCrossEntropy"}]}
    t0 = time.perf_counter()
    net = build_network(cfg, 1)
    n_params = sum(a.size for p in net.params for a in p.values())
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 1, 6, 6))
    y = np.arange(6) % 5
    err = max_rel_err(analytic_grads(net, x, y), numeric_grads(net, x, y, eps=1e-4))
    dt = time.perf_counter() - t0
    verdict(1, n_params <= 500 and err <= 1e-5 and dt < 30,
            f"{n_params} params, max rel err {err:.2e} (limit 1e-5), {dt:.1f}s (limit 30s)")


def test_criterion_2_expectation_preserved(verdict):
    t0 = time.perf_counter()
    tau, n = 0.2, 10**5
    bound = 4 * tau / math.sqrt(n)
    rng = np.random.default_rng(12345)
    worst = 0.0
    for frac in (-0.9, -0.5, -0.2, 0.2, 0.5, 0.9):
        d = frac * tau
        out, _ = stochastic_prune(np.full(n, d), tau, rng.random(n))
        worst = max(worst, abs(float(out.mean()) - d))
    dt = time.perf_counter() - t0
    verdict(2, worst <= bound and dt < 10, f"max |mean - delta| {worst:.2e} (bound {bound:.2e}), {dt:.2f}s")


def test_criterion_3_threshold(verdict):
    t0 = time.perf_counter()
    sigma = 2.5
    d = np.random.default_rng(7).normal(0.0, sigma, 10**6)
    s_hat = float(np.std(d))
    gaps = {}
    for p in RATES:
        tau = compute_threshold(p, s_hat)
        gaps[p] = abs(float(np.mean(np.abs(d) <= tau)) - p)
    grid = np.concatenate([np.linspace(1e-6, 1 - 1e-6, 201), [(1 + p) / 2 for p in RATES]])
    q_err = max(abs(norm_ppf(float(q)) - quantile_bisect(float(q))) for q in grid)
    dt = time.perf_counter() - t0
    ok = max(gaps.values()) <= 0.01 and q_err <= 1e-6 and dt < 10
    verdict(3, ok, "coverage gaps " + ", ".join(f"P={p}: {g * 100:.3f}pt" for p, g in gaps.items())
            + f"; quantile err {q_err:.1e}; {dt:.2f}s")


def test_criterion_4_sparsity_oracle(verdict):
    d = np.random.default_rng(8).standard_normal(10**6)
    gaps = {}
    for p in RATES:
        _, stats = Pruner(PruneConfig(rate=p, enabled=True, seed=8))(0, 0, d)
        gaps[p] = (stats.realized_zero_fraction, expected_zero_fraction(p))
    worst = max(abs(a - b) for a, b in gaps.values())
    verdict(4, worst <= 0.02, ", ".join(f"P={p}: realized {a:.4f} vs expected {b:.4f}" for p, (a, b) in gaps.items()))


def _mnist_cfg(mnist_dir, layers, subset, train_kw, **extra):
    raw = {"seed": 0, "network": {"input_shape": [1, 28, 28], "layers": layers},
           "train": {"batch_size": 64, "lr": 0.01, "momentum": 0.9, **train_kw},
           "data": {"kind": "mnist", "path": str(mnist_dir), "subset": subset, **extra.pop("data", {})}, **extra}
    return parse_run_config(raw)


def test_criterion_5_angle_dynamics(verdict, mnist_dir):
    t0 = time.perf_counter()
    layers = [{"kind": "Linear", "out_features": 100}, {"kind": "ReLU"},
              {"kind": "Linear", "out_features": 10}, {"kind": "SoftmaxCrossEntropy"}]
    cfg = _mnist_cfg(mnist_dir, layers, 5000, {"epochs": 3, "angle_every": 10},
                     feedback={"mode": "signsym"}, prune={"rate": 0.7, "enabled": True})
    tr, _ = load_datasets(cfg)
    rep = train(build_network(cfg.network, cfg.seed), tr, cfg.train)
    late = [a.angle_deg for a in rep.angles if a.epoch > 1]
    hidden_final = [a.angle_deg for a in rep.angles if a.epoch == 3 and a.layer == 0]
    dt = time.perf_counter() - t0
    ok = (None not in late and max(late) < 90 and float(np.mean(hidden_final)) < 80 and dt < 300)
    verdict(5, ok, f"max angle after epoch 1 {max(late):.1f} deg (<90), final-epoch hidden mean "
                   f"{np.mean(hidden_final):.1f} deg (<80), {len(late)} samples, {dt:.0f}s")


@pytest.mark.slow
def test_criterion_6_accuracy_parity(verdict, mnist_dir):
    t0 = time.perf_counter()
    cfg = _mnist_cfg(mnist_dir, CNN_LAYERS, 10000, {"epochs": 5}, prune={"rate": 0.7})
    tr, val = load_datasets(cfg)
    modes = ["bp", "signsym_prune", "binarysign_prune"]
    cmp = compare_modes(tr, cfg.train, modes, cfg.network, val=val)
    final = dict(zip(modes, cmp.table()[-1][1:]))
    dt = time.perf_counter() - t0
    gap = final["bp"] - final["signsym_prune"]
    ordering = "holds" if final["binarysign_prune"] < final["signsym_prune"] else "does not hold"
    detail = (f"val acc BP {final['bp']:.4f} (>=0.93), SignSym+prune {final['signsym_prune']:.4f} "
              f"(gap {gap * 100:.2f}pt, <=2pt), {dt:.0f}s (<900s); "
              f"non-gating: BinarySign+prune {final['binarysign_prune']:.4f}, ordering {ordering}")
    verdict(6, final["bp"] >= 0.93 and gap <= 0.02 and dt < 900, detail)


def test_criterion_7_cost_properties(verdict):
    net = build_network({"input_shape": [1, 28, 28], "layers": CNN_LAYERS}, 0)
    shapes = layer_shapes(net, 64)
    base = estimate_cost(shapes, "bp")
    self_ratios = cost_ratios(base, base)
    per_layer = all(phase2_traffic(s, "signsym", CostParams()) < phase2_traffic(s, "bp", CostParams()) for s in shapes)
    ratios = {p: cost_ratios(estimate_cost(shapes, "signsym", zero_fractions=static_zero_fractions(shapes, p)), base)
              for p in (0.0, 0.5, 0.9)}
    macs = [ratios[p]["mac"] for p in (0.0, 0.5, 0.9)]
    ok = all(v == 1.0 for v in self_ratios.values()) and per_layer and macs == sorted(macs)
    verdict(7, ok, f"BP self-ratios {self_ratios}; SignSym phase-2 traffic below BP on all {len(shapes)} layers: "
                   f"{per_layer}; MAC ratio by P " + ", ".join(f"{p}: {m:.3f}" for p, m in zip((0.0, 0.5, 0.9), macs))
            + f"; energy ratio at P=0.9 {ratios[0.9]['energy']:.3f}")


def test_criterion_8_cli_determinism(verdict, tmp_path):
    cfg = {"seed": 5, "network": {"input_shape": [1, 8, 8], "layers": [
        {"kind": "Conv2d", "out_channels": 6, "kernel_size": 3, "pad": 1}, {"kind": "BatchNorm"}, {"kind": "ReLU"},
        {"kind": "MaxPool2d", "kernel_size": 2}, {"kind": "Linear", "out_features": 3},
        {"kind": "SoftmaxCrossEntropy"}]},
        "train": {"epochs": 2, "batch_size": 100, "lr": 0.02, "angle_every": 1, "histogram_bins": 8},
        "feedback": {"mode": "signsym"}, "prune": {"rate": 0.7, "enabled": True},
        "data": {"kind": "synth_blobs", "classes": 3, "samples": 300, "dims": [1, 8, 8], "val_samples": 60}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    blobs = {}
    for threads in (1, 4):
        for rep in (0, 1):
            run = tmp_path / f"t{threads}_{rep}"
            assert cli_main(["train", "--config", str(path), "--threads", str(threads), "--out-dir", str(run)]) == 0
            blobs[(threads, rep)] = ((run / "metrics.jsonl").read_bytes(),
                                     (run / "checkpoints" / "final.efgd").read_bytes())
    same_1 = blobs[(1, 0)] == blobs[(1, 1)]
    same_4 = blobs[(4, 0)] == blobs[(4, 1)]
    across = blobs[(1, 0)] == blobs[(4, 0)]
    verdict(8, same_1 and same_4, f"threads=1 identical: {same_1}; threads=4 identical: {same_4}; "
                                  f"identical across thread counts: {across}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
