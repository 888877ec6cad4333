"""Minimum-cost one-to-one assignment (shortest augmenting path with potentials)."""

from __future__ import annotations

import numpy as np


def _solve_rows(cost: np.ndarray) -> np.ndarray:
    """Assign each row of an ``n x m`` (n <= m) matrix to a distinct column; returns col per row."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = 1-based row matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    c = np.zeros((n + 1, m + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = c[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row


def hungarian_match(cost) -> tuple[list[tuple[int, int]], float]:
    """Match every ground truth (column) to a distinct prediction (row).

    ``cost`` is ``(n_pred, n_gt)`` with ``n_gt <= n_pred``. Returns
    ``(pairs, total)`` where ``pairs`` are ``(pred, gt)`` sorted by prediction.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if n_gt > n_pred:
        raise ValueError(f"more ground truths ({n_gt}) than predictions ({n_pred})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if n_gt == 0:
        return [], 0.0
    pred_of_gt = _solve_rows(cost.T)
    pairs = sorted((int(p), g) for g, p in enumerate(pred_of_gt))
    total = float(sum(cost[p, g] for p, g in pairs))
    return pairs, total
