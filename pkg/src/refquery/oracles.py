"""Slow reference computations used to cross-check the fast implementations.

Nothing here shares code with the production paths: the assignment oracle
enumerates permutations and the metric oracles walk pixels in Python loops.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def brute_force_assignment(cost) -> tuple[tuple[int, ...], float]:
    """Minimum-cost permutation by enumeration; ties go to the lexicographically smallest."""
    c = np.asarray(cost, dtype=np.float64)
    n = c.shape[0]
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(n)):
        total = 0.0
        for i in range(n):
            total += c[i, perm[i]]
        if total < best:
            best, best_perm = total, perm
    return best_perm, best


def brute_iou(pred, gt) -> float:
    inter = union = 0
    h, w = len(gt), len(gt[0])
    for y in range(h):
        for x in range(w):
            a, b = bool(pred[y][x]), bool(gt[y][x])
            inter += a and b
            union += a or b
    return 1.0 if union == 0 else inter / union


def brute_boundary(mask) -> list[tuple[int, int]]:
    """Foreground pixels touching background (4-neighbourhood) or the image edge."""
    h, w = len(mask), len(mask[0])
    out = []
    for y in range(h):
        for x in range(w):
            if not mask[y][x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not mask[yy][xx]:
                    out.append((y, x))
                    break
    return out


def _fraction_within(src, dst, tol) -> float:
    hit = 0
    for y, x in src:
        if any((y - v) ** 2 + (x - u) ** 2 <= tol * tol for v, u in dst):
            hit += 1
    return hit / len(src)


def brute_boundary_f(pred, gt, tol: float | None = None) -> float:
    h, w = len(gt), len(gt[0])
    if tol is None:
        tol = math.ceil(0.008 * math.sqrt(h * h + w * w))
    any_p = any(any(r) for r in pred)
    any_g = any(any(r) for r in gt)
    if not any_p and not any_g:
        return 1.0
    bp, bg = brute_boundary(pred), brute_boundary(gt)
    if not bp or not bg:
        return 0.0
    p = _fraction_within(bp, bg, tol)
    r = _fraction_within(bg, bp, tol)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)
