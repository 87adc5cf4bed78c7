"""Independent slow reference implementations used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np


def naive_wce(pred, gt, lam, eta, reduction="sum", rcf=False, eps=1e-7):
    """Per-pixel loop over the class-balanced cross-entropy for one image."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    n_pos = n_neg = 0
    for y in gt.flat:
        if y > eta:
            n_pos += 1
        elif y == 0:
            n_neg += 1
    n = n_pos + n_neg
    if n == 0:
        return 0.0
    alpha, beta = n_pos / n, lam * n_neg / n
    if rcf:
        alpha, beta = n_neg / n, lam * n_pos / n
    total = 0.0
    for p, y in zip(pred.flat, gt.flat):
        p = min(max(p, eps), 1 - eps)
        if y > eta:
            total += -alpha * math.log(p)
        elif y == 0:
            total += -beta * math.log(1 - p)
    if reduction == "mean":
        total /= gt.size
    return total


def naive_conv2d(x, w, b, padding):
    """Direct nested-loop 2-D convolution (cross-correlation), single image (C, H, W)."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, c, u, v] * xp[c, i + u, j + v]
                out[o, i, j] = acc
    return out


def brute_force_matching(pred, gt, d_max):
    """Largest one-to-one matching by exhaustive search over assignments."""
    p = list(zip(*np.nonzero(pred)))
    g = list(zip(*np.nonzero(gt)))
    ok = [[(a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 <= d_max ** 2 for b in g] for a in p]
    best = 0
    # assign each pred pixel to a distinct gt index or to nothing (-1)
    for assign in itertools.product(range(-1, len(g)), repeat=len(p)):
        used = [a for a in assign if a >= 0]
        if len(used) != len(set(used)):
            continue
        if all(a < 0 or ok[i][a] for i, a in enumerate(assign)):
            best = max(best, len(used))
    return best


def perimeter_mask(size, r0, c0, r1, c1):
    m = np.zeros((size, size), dtype=bool)
    for r in range(r0, r1 + 1):
        for c in range(c0, c1 + 1):
            if r in (r0, r1) or c in (c0, c1):
                m[r, c] = True
    return m
