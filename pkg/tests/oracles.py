"""Independent reference implementations used by the test-suite.

Everything here is deliberately naive: loops over voxels and scalars, no
shared code with the package.  Speed is irrelevant, transparency is not.
"""
from __future__ import annotations

import math

import numpy as np


def central_diff(f, x, h=1e-5, idx=None):
    """Central finite differences of scalar ``f`` at ``x`` (float64 vector).

    ``idx`` restricts the coordinates probed; the result then has the same
    length as ``idx``.
    """
    x = np.array(x, dtype=np.float64)
    idx = range(x.size) if idx is None else idx
    out = []
    flat = x.reshape(-1)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), floor))


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def rmsprop_nesterov_scalar(theta, grads, lr=1e-3, rho=0.9, eps=1e-4, m=0.6):
    """Scalar replay of the update recurrences; returns theta after each step."""
    a = v = 0.0
    out = []
    for g in grads:
        a = rho * a + (1 - rho) * g * g
        u = g / math.sqrt(a + eps)
        v = m * v - lr * u
        theta = theta + m * v - lr * u
        out.append(theta)
    return out


def flood_fill(mask):
    """Components of a 2-D boolean mask under 8-connectivity.

    Returns a list of sorted flat-index lists, ordered by their first voxel
    in raster order.
    """
    mask = np.asarray(mask, bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            stack, members = [(r, c)], []
            seen[r, c] = True
            while stack:
                y, x = stack.pop()
                members.append(y * w + x)
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                            seen[yy, xx] = True
                            stack.append((yy, xx))
            comps.append(sorted(members))
    return comps


def brute_match(pred_comps, truth_comps, min_overlap=1):
    """(tp, fp, fn) by pairwise set intersection."""
    truth_sets = [set(t) for t in truth_comps]
    detected = [False] * len(truth_sets)
    fp = 0
    for p in pred_comps:
        ps = set(p)
        hit_any = False
        for j, t in enumerate(truth_sets):
            if len(ps & t) >= min_overlap:
                detected[j] = True
                hit_any = True
        fp += not hit_any
    tp = sum(detected)
    return tp, fp, len(truth_sets) - tp
