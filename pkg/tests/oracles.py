"""Slow, independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np


def edit_distance_exponential(a: str, b: str) -> int:
    """Plain recursive Levenshtein distance, no memoization (short inputs only)."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        edit_distance_exponential(a[1:], b[1:]) + (a[0] != b[0]),
        edit_distance_exponential(a[1:], b) + 1,
        edit_distance_exponential(a, b[1:]) + 1,
    )


def edit_distance_recursive(a: str, b: str) -> int:
    """Same recursion with memoization over suffix positions."""

    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j + 1) + (a[i] != b[j]), go(i + 1, j) + 1, go(i, j + 1) + 1)

    return go(0, 0)


def min_path_exhaustive(cost: np.ndarray, start, end) -> float:
    """Minimum over all simple 8-connected paths of the summed pixel costs.

    Depth-first enumeration; branches are cut once their partial sum reaches
    the best complete path found so far (valid because costs are positive).
    """
    rows, cols = cost.shape
    best = [math.inf]
    seen = np.zeros(cost.shape, dtype=bool)
    steps = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if dr or dc]

    def dfs(r, c, acc):
        if acc >= best[0]:
            return
        if (r, c) == tuple(end):
            best[0] = acc
            return
        seen[r, c] = True
        for dr, dc in steps:
            nr, nc = r + dr, c + dc
            if 0 <= nr < rows and 0 <= nc < cols and not seen[nr, nc] and np.isfinite(cost[nr, nc]):
                dfs(nr, nc, acc + cost[nr, nc])
        seen[r, c] = False

    dfs(start[0], start[1], float(cost[start]))
    return best[0]


def poisson_dense(u: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Dense solve of the masked Poisson problem built from the edge incidence matrix.

    For every in-image 4-neighbour edge (p, q) with at least one end in the
    mask, the equation ``v_q - v_p = u_q - u_p`` is wanted when both ends are
    unknown, and ``v_q - v_p = 0`` with the outside end pinned to 1
    otherwise. The normal equations of this least-squares problem are the
    discrete Poisson system.
    """
    rows, cols = u.shape
    unknown = np.flatnonzero(mask.ravel())
    pos = {p: i for i, p in enumerate(unknown)}
    B, rhs = [], []
    for r in range(rows):
        for c in range(cols):
            for rr, cc in ((r, c + 1), (r + 1, c)):
                if rr >= rows or cc >= cols:
                    continue
                p, q = r * cols + c, rr * cols + cc
                if p not in pos and q not in pos:
                    continue
                row = np.zeros(len(unknown))
                target = u.flat[q] - u.flat[p] if (p in pos and q in pos) else 0.0
                if q in pos:
                    row[pos[q]] += 1.0
                else:
                    target -= 1.0
                if p in pos:
                    row[pos[p]] -= 1.0
                else:
                    target += 1.0
                B.append(row)
                rhs.append(target)
    B, rhs = np.array(B), np.array(rhs)
    v = np.linalg.solve(B.T @ B, B.T @ rhs)
    out = np.ones(u.size)
    out[unknown] = v
    return out.reshape(u.shape)


def otsu_scan(values: np.ndarray, bins: int = 256) -> float:
    """Exhaustive scan over all bin-boundary thresholds using pixel-level class moments."""
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0, 1)
    b = np.minimum((v * bins).astype(int), bins - 1)
    centers = (b + 0.5) / bins
    best, best_t = -1.0, None
    for k in range(1, bins):
        dark = b < k
        n0, n1 = dark.sum(), (~dark).sum()
        if n0 == 0 or n1 == 0:
            continue
        w0, w1 = n0 / v.size, n1 / v.size
        var_b = w0 * w1 * (centers[dark].mean() - centers[~dark].mean()) ** 2
        if var_b > best * (1 + 1e-12):
            best, best_t = var_b, k / bins
    return best_t


def bootstrap_exact(per_line, level: float = 0.95):
    """All ``n**n`` ordered resamples of ``n`` lines with their ratio statistics."""
    stats = np.asarray(per_line, dtype=np.float64)
    n = len(stats)
    vals = []
    for combo in itertools.product(range(n), repeat=n):
        pick = stats[list(combo)]
        vals.append(pick[:, 0].sum() / pick[:, 1].sum())
    return np.array(vals)
