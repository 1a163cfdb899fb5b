"""Independent oracles shared by the test modules."""
from __future__ import annotations

import math

import numpy as np

from efficientgrad.network import backward_pass, forward, weight_grad

# rel err = |a - n| / max(|a|, |n|, REL_FLOOR)
REL_FLOOR = 1e-6


def conv_direct(x, k, stride=1, pad=0):
    """Seven nested loops; slow but obviously right."""
    n, c, h, w = x.shape
    co, ci, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for q in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[a, q, i * stride + u, j * stride + v] * k[o, q, u, v]
                    out[a, o, i, j] = s
    return out


def norm_cdf_erf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def quantile_bisect(p: float, lo: float = -40.0, hi: float = 40.0) -> float:
    """Inverse of the normal CDF by bisection on erf."""
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if norm_cdf_erf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def analytic_grads(net, x, y):
    _, trace, _ = forward(net, x, y, training=True)
    deltas, _ = backward_pass(net, trace)
    return [weight_grad(net, i, deltas[i], trace) if net.params[i] else {} for i in range(len(net.layers))]


def numeric_grads(net, x, y, eps=1e-4):
    """Central differences of the training-mode loss.

    Running batch-norm statistics are restored after every probe so the
    probes do not perturb each other.
    """
    saved = [{k: v.copy() for k, v in b.items()} for b in net.buffers]
    out = []
    for i, p in enumerate(net.params):
        g = {}
        for name, arr in p.items():
            num = np.zeros_like(arr)
            for j in np.ndindex(arr.shape):
                orig = arr[j]
                arr[j] = orig + eps
                lp = forward(net, x, y, training=True)[0]
                arr[j] = orig - eps
                lm = forward(net, x, y, training=True)[0]
                arr[j] = orig
                num[j] = (lp - lm) / (2 * eps)
            g[name] = num
        out.append(g)
    for b, s in zip(net.buffers, saved):
        for k in b:
            b[k][...] = s[k]
    return out


def max_rel_err(a_grads, n_grads) -> float:
    worst = 0.0
    for ga, gn in zip(a_grads, n_grads):
        for k in gn:
            a, n = ga[k], gn[k]
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
