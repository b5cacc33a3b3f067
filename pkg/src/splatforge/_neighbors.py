"""Exact k-nearest-neighbor search on a uniform spatial hash grid.

Cells are sized for ~1 point each; queries expand over Chebyshev shells and
stop once the kth-best distance proves no farther shell can beat it. Ties are
broken by point index, so results are exact and deterministic.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange

# cells are packed three-per-int64 (21 bits per axis, non-negative)
_MAX_CELLS = 1 << 21


@njit(cache=True)
def _insert(best_d2, best_idx, d2, j):
    """Keep (d2, j) pairs sorted ascending, smaller index first on ties."""
    k = best_d2.shape[0]
    last = best_d2[k - 1]
    if d2 > last or (d2 == last and 0 <= best_idx[k - 1] < j):
        return
    pos = k - 1
    while pos > 0 and (best_d2[pos - 1] > d2
                       or (best_d2[pos - 1] == d2 and best_idx[pos - 1] > j)):
        best_d2[pos] = best_d2[pos - 1]
        best_idx[pos] = best_idx[pos - 1]
        pos -= 1
    best_d2[pos] = d2
    best_idx[pos] = j


@njit(parallel=True, cache=True)
def _query_kernel(queries, pos_sorted, orig_idx, cell_keys, cell_starts,
                  lo, h, dims, out_d2, out_idx):
    n = queries.shape[0]
    k = out_d2.shape[1]
    for i in prange(n):
        best_d2 = np.full(k, np.inf)
        best_idx = np.full(k, -1, dtype=np.int64)
        qx, qy, qz = queries[i, 0], queries[i, 1], queries[i, 2]
        cx = min(max(int(np.floor((qx - lo[0]) / h)), 0), dims[0] - 1)
        cy = min(max(int(np.floor((qy - lo[1]) / h)), 0), dims[1] - 1)
        cz = min(max(int(np.floor((qz - lo[2]) / h)), 0), dims[2] - 1)
        last_shell = max(max(cx, dims[0] - 1 - cx),
                         max(max(cy, dims[1] - 1 - cy), max(cz, dims[2] - 1 - cz)))
        shell = 0
        while True:
            for dz in range(-shell, shell + 1):
                z = cz + dz
                if z < 0 or z >= dims[2]:
                    continue
                for dy in range(-shell, shell + 1):
                    y = cy + dy
                    if y < 0 or y >= dims[1]:
                        continue
                    for dx in range(-shell, shell + 1):
                        if max(abs(dx), max(abs(dy), abs(dz))) != shell:
                            continue
                        x = cx + dx
                        if x < 0 or x >= dims[0]:
                            continue
                        key = (np.int64(z) << 42) | (np.int64(y) << 21) | np.int64(x)
                        u = np.searchsorted(cell_keys, key)
                        if u >= cell_keys.shape[0] or cell_keys[u] != key:
                            continue
                        for row in range(cell_starts[u], cell_starts[u + 1]):
                            j = orig_idx[row]
                            if j == i:
                                continue
                            ex = pos_sorted[row, 0] - qx
                            ey = pos_sorted[row, 1] - qy
                            ez = pos_sorted[row, 2] - qz
                            _insert(best_d2, best_idx, ex * ex + ey * ey + ez * ez, j)
            # points beyond this shell are at least shell*h away
            if best_idx[k - 1] >= 0 and best_d2[k - 1] <= (shell * h) ** 2:
                break
            if shell >= last_shell:
                break
            shell += 1
        out_d2[i] = best_d2
        out_idx[i] = best_idx


def nearest_neighbors(positions: np.ndarray, k: int) -> tuple:
    """(N, k) squared distances and indices of each point's k nearest others.

    Exact; rows sorted ascending with index as the tie-breaker. Needs k other
    points to exist.
    """
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValueError(f"positions must be (N, 3), got {pos.shape}")
    if k < 1:
        raise ValueError("k must be at least 1")
    if k >= n:
        raise ValueError(f"{k} neighbors need at least {k + 1} points, got {n}")

    lo = pos.min(axis=0)
    extent = pos.max(axis=0) - lo
    volume = float(np.prod(extent))
    h = (volume / n) ** (1.0 / 3.0) if volume > 0 else float(extent.max())
    # keep every axis under the packable cell budget; h = 0 means one cell
    h = max(h, float(extent.max()) / (_MAX_CELLS - 2), 1e-300)
    if extent.max() == 0.0:
        h = 1.0

    cells = np.floor((pos - lo) / h).astype(np.int64)
    np.minimum(cells, np.maximum((extent / h).astype(np.int64), 0), out=cells)
    dims = cells.max(axis=0) + 1
    keys = (cells[:, 2] << 42) | (cells[:, 1] << 21) | cells[:, 0]
    order = np.argsort(keys, kind="stable")
    cell_keys, counts = np.unique(keys, return_counts=True)
    starts = np.zeros(cell_keys.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])

    out_d2 = np.empty((n, k), dtype=np.float64)
    out_idx = np.empty((n, k), dtype=np.int64)
    _query_kernel(pos, np.ascontiguousarray(pos[order]), order, cell_keys, starts,
                  lo, h, dims.astype(np.int64), out_d2, out_idx)
    return out_d2, out_idx


def mean_nn_distance(positions: np.ndarray) -> float:
    """Mean distance to the single nearest neighbor (the density scale d-bar)."""
    d2, _ = nearest_neighbors(positions, 1)
    return float(np.sqrt(d2[:, 0]).mean())
