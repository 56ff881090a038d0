"""Rectangular linear assignment via shortest augmenting paths.

This is the O(n^2 m) potential-based Hungarian method: rows are inserted
one at a time and each insertion runs a Dijkstra-like search over columns
with reduced costs ``C[i, j] - u[i] - v[j]``.  The column scan is vectorised.
Ties go to the lowest column index.
"""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError, NumericalInstabilityError


def linear_assignment(cost):
    """Minimum-cost injective map rows -> columns for an ``n x m`` matrix, ``n <= m``.

    Returns ``(columns, total)`` where ``columns[i]`` is the column given to row ``i``.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionError(f"cost matrix must be 2-D, got shape {c.shape}")
    n, m = c.shape
    if n > m:
        raise DimensionError(f"more rows ({n}) than columns ({m})")
    if not np.all(np.isfinite(c)):
        raise NumericalInstabilityError("cost matrix has non-finite entries")
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)   # column -> row (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    cols = np.empty(n, dtype=np.int64)
    taken = np.flatnonzero(owner[1:])
    cols[owner[1:][taken] - 1] = taken
    return cols, float(c[np.arange(n), cols].sum())
