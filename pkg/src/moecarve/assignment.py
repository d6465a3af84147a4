"""Square linear assignment: exact solver and brute-force oracle."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

BRUTE_FORCE_MAX_N = 9


@dataclass(frozen=True)
class Assignment:
    perm: np.ndarray  # row i -> column perm[i]
    total_cost: float


def _cost_matrix(c) -> np.ndarray:
    cost = np.asarray(c, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    return cost


def solve_lap(c) -> Assignment:
    """Minimum-cost perfect matching by shortest augmenting paths.

    Rows are inserted one at a time; each insertion runs a Dijkstra-style
    search over reduced costs ``cost[i, j] - u[i] - v[j]`` and augments along
    the shortest path found. Dual feasibility is kept throughout, so the
    result is optimal. O(n^3) time, with the column scans vectorized.
    """
    cost = _cost_matrix(c)
    n = cost.shape[0]
    if n == 0:
        return Assignment(perm=np.zeros(0, dtype=np.int64), total_cost=0.0)

    # column 0 is a virtual column used as the path root; rows are 1-based
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)    # p[j]: row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)  # predecessor column on the path

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cols = np.flatnonzero(free)
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            k = int(np.argmin(minv[cols]))
            j1 = int(cols[k])
            delta = minv[j1]
            used_cols = np.flatnonzero(used)
            u[p[used_cols]] += delta
            v[used_cols] -= delta
            minv[cols] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    perm = np.empty(n, dtype=np.int64)
    perm[p[1:] - 1] = np.arange(n)
    return Assignment(perm=perm, total_cost=float(cost[np.arange(n), perm].sum()))


@lru_cache(maxsize=BRUTE_FORCE_MAX_N + 1)
def _all_perms(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)


def brute_force_lap(c) -> Assignment:
    """Exhaustive minimum over all n! permutations (test oracle, n <= 9)."""
    cost = _cost_matrix(c)
    n = cost.shape[0]
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force limited to n <= {BRUTE_FORCE_MAX_N}, got {n}")
    perms = _all_perms(n)
    totals = cost[np.arange(n), perms].sum(axis=1)
    best = int(np.argmin(totals))
    return Assignment(perm=perms[best].copy(), total_cost=float(totals[best]))
