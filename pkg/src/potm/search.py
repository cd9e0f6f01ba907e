"""Linked-cell neighbour search and support-domain construction.

Nodes are bucketed into a uniform grid of cubic cells. Only occupied cells
are stored (sorted cell keys plus a CSR row list), so memory does not depend
on the extent of the region. A radius query visits the 3x3x3 block of cells
around the query point, which is exhaustive as long as the radius does not
exceed the cell size.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .lme import LME_OK, LmeParams, lme_kernel
from .store import ID_DTYPE, PAD_ID

logger = logging.getLogger(__name__)


class SearchError(RuntimeError):
    pass


class SupportUnsatisfiableError(SearchError):
    """No admissible support within the allowed radius growth."""


@dataclass(frozen=True)
class SearchConfig:
    radius_factor: float = 1.8
    min_support: int = 8
    max_enlarge: int = 5
    enlarge_factor: float = 1.3
    halo_cover: int = 2
    freeze_spacing: bool = False

    def __post_init__(self):
        if self.radius_factor <= 0 or self.enlarge_factor <= 1.0:
            raise ValueError("radius_factor must be > 0 and enlarge_factor > 1")
        if self.max_enlarge < 0 or self.halo_cover < 0:
            raise ValueError("max_enlarge and halo_cover must be non-negative")

    def check(self, dim: int) -> None:
        need = dim + 1
        if self.min_support < need:
            raise ValueError(f"min_support must be >= {need} in {dim}D, got {self.min_support}")

    def search_cap(self, max_spacing: float) -> float:
        """Largest admissible radius, also the linked-cell size and halo reach.

        A small relative slack keeps the last allowed enlargement of the
        largest MP admissible despite rounding of the repeated products.
        """
        return (self.radius_factor * max_spacing
                * self.enlarge_factor ** min(self.halo_cover, self.max_enlarge) * (1 + 1e-9))


@dataclass
class LinkedCellGrid:
    origin: np.ndarray
    cell_size: float
    dims: np.ndarray
    keys: np.ndarray        # sorted occupied cell keys
    starts: np.ndarray      # CSR offsets into ``rows`` per occupied cell
    rows: np.ndarray        # input row numbers, grouped by cell, ascending id inside
    ids: np.ndarray
    positions: np.ndarray

    def __len__(self):
        return len(self.ids)

    def cell_index(self, x) -> np.ndarray:
        return np.floor((np.asarray(x, dtype=float) - self.origin) / self.cell_size).astype(np.int64)

    def cells(self) -> dict[tuple[int, int, int], list[tuple[int, np.ndarray]]]:
        """Occupancy as a mapping cell index -> [(id, position), ...]."""
        out = {}
        d1, d2 = int(self.dims[1]), int(self.dims[2])
        for j, key in enumerate(self.keys):
            key = int(key)
            idx = (key // (d1 * d2), (key // d2) % d1, key % d2)
            out[idx] = [(int(self.ids[r]), self.positions[r])
                        for r in self.rows[self.starts[j]:self.starts[j + 1]]]
        return out


def build_grid(ids, positions, cell_size: float) -> LinkedCellGrid:
    if not cell_size > 0:
        raise ValueError(f"cell_size must be positive, got {cell_size}")
    ids = np.asarray(ids, dtype=ID_DTYPE)
    pos = np.zeros((len(ids), 3))
    if len(ids) == 0:
        return LinkedCellGrid(np.zeros(3), float(cell_size), np.ones(3, dtype=np.int64),
                              np.zeros(0, np.int64), np.zeros(1, np.int64),
                              np.zeros(0, np.int64), ids, pos)
    p = np.asarray(positions, dtype=float).reshape(len(ids), -1)
    pos[:, : p.shape[1]] = p
    origin = pos.min(axis=0)
    dims = np.floor((pos.max(axis=0) - origin) / cell_size).astype(np.int64) + 1
    c = np.minimum(np.floor((pos - origin) / cell_size).astype(np.int64), dims - 1)
    lin = (c[:, 0] * dims[1] + c[:, 1]) * dims[2] + c[:, 2]
    order = np.lexsort((ids, lin))
    lin_sorted = lin[order]
    keys, starts = np.unique(lin_sorted, return_index=True)
    starts = np.append(starts, len(ids)).astype(np.int64)
    return LinkedCellGrid(origin, float(cell_size), dims, keys.astype(np.int64), starts,
                          order.astype(np.int64), ids, pos)


@njit(cache=True, nogil=True)
def _query_rows(keys, starts, rows, X, origin, cs, dims, x, r, out):
    """Rows of nodes within distance ``r`` of ``x`` (ascending row order)."""
    n = 0
    r2 = r * r
    c0 = math.floor((x[0] - origin[0]) / cs)
    c1 = math.floor((x[1] - origin[1]) / cs)
    c2 = math.floor((x[2] - origin[2]) / cs)
    nk = keys.shape[0]
    for a in range(c0 - 1, c0 + 2):
        if a < 0 or a >= dims[0]:
            continue
        for b in range(c1 - 1, c1 + 2):
            if b < 0 or b >= dims[1]:
                continue
            for c in range(c2 - 1, c2 + 2):
                if c < 0 or c >= dims[2]:
                    continue
                key = (a * dims[1] + b) * dims[2] + c
                j = np.searchsorted(keys, key)
                if j >= nk or keys[j] != key:
                    continue
                for k in range(starts[j], starts[j + 1]):
                    row = rows[k]
                    d0 = X[row, 0] - x[0]
                    d1 = X[row, 1] - x[1]
                    d2 = X[row, 2] - x[2]
                    if d0 * d0 + d1 * d1 + d2 * d2 <= r2:
                        out[n] = row
                        n += 1
    out[:n] = np.sort(out[:n])
    return n


def query_radius(grid: LinkedCellGrid, x, r: float) -> np.ndarray:
    """Ids within the closed ball of radius ``r`` around ``x``, ascending."""
    if r > grid.cell_size:
        raise ValueError(f"query radius {r} exceeds cell size {grid.cell_size}")
    if len(grid) == 0:
        return np.zeros(0, dtype=ID_DTYPE)
    xq = np.zeros(3)
    xv = np.asarray(x, dtype=float)
    xq[: xv.size] = xv
    out = np.empty(len(grid), dtype=np.int64)
    n = _query_rows(grid.keys, grid.starts, grid.rows, grid.positions, grid.origin,
                    grid.cell_size, grid.dims, xq, float(r), out)
    # rows ascend with position in the input; map through ids and re-sort in
    # case the input was not id-sorted
    return np.sort(grid.ids[out[:n]])


# ---------------------------------------------------------------------------
# batched support search
# ---------------------------------------------------------------------------

S_OK = 0
S_UNSATISFIABLE = 1
S_CAPACITY = 2


@njit(cache=True, nogil=True)
def support_kernel(keys, starts, rows, X, origin, cs, dims, mp_x, mp_h, which,
                   radius_factor, enlarge, max_enlarge, min_support, cap, gamma, tol, max_iter,
                   dim, out_cnt, out_rows, out_N, out_B, out_radius, out_reach):
    """Search and LME for the material points listed in ``which``.

    Candidate rows must be sorted by node id (the local node table is).
    Returns ``(status, failing_mp_row, needed_width)``.
    """
    K = out_rows.shape[1]
    tmp = np.empty(X.shape[0], dtype=np.int64)
    Xs = np.empty((X.shape[0], 3))
    lam = np.zeros(3)
    N = np.empty(X.shape[0])
    B = np.zeros((X.shape[0], 3))
    xp = np.empty(3)
    for q in range(which.shape[0]):
        p = which[q]
        h = mp_h[p]
        for d in range(3):
            xp[d] = mp_x[p, d]
        r = radius_factor * h
        beta = gamma / (h * h)
        found = False
        n = 0
        for _ in range(max_enlarge + 1):
            if r > cap:
                break
            n = _query_rows(keys, starts, rows, X, origin, cs, dims, xp, r, tmp)
            if n >= min_support:
                for i in range(n):
                    for d in range(3):
                        Xs[i, d] = X[tmp[i], d]
                st, _ = lme_kernel(xp, Xs, n, beta, dim, tol * h, max_iter, True, lam, N, B)
                if st == LME_OK:
                    found = True
                    break
            r = r * enlarge
        if not found:
            return S_UNSATISFIABLE, p, 0
        if n > K:
            return S_CAPACITY, p, n
        reach = 0.0
        for i in range(n):
            out_rows[p, i] = tmp[i]
            out_N[p, i] = N[i]
            d2 = 0.0
            for d in range(3):
                out_B[p, i, d] = B[i, d]
                dd = Xs[i, d] - xp[d]
                d2 = d2 + dd * dd
            if d2 > reach:
                reach = d2
        out_cnt[p] = n
        out_radius[p] = r
        out_reach[p] = math.sqrt(reach)
    return S_OK, -1, 0


@njit(cache=True, nogil=True)
def shape_kernel(X, sup_rows, sup_cnt, mp_x, mp_h, which, gamma, tol, max_iter, dim,
                 out_N, out_B):
    """LME shape data on fixed supports; returns the first failing row or -1."""
    K = sup_rows.shape[1]
    Xs = np.empty((K, 3))
    lam = np.zeros(3)
    N = np.empty(K)
    B = np.zeros((K, 3))
    for q in range(which.shape[0]):
        p = which[q]
        n = sup_cnt[p]
        for i in range(n):
            for d in range(3):
                Xs[i, d] = X[sup_rows[p, i], d]
        h = mp_h[p]
        st, _ = lme_kernel(mp_x[p], Xs, n, gamma / (h * h), dim, tol * h, max_iter, True,
                           lam, N, B)
        if st != LME_OK:
            return p
        for i in range(n):
            out_N[p, i] = N[i]
            for d in range(3):
                out_B[p, i, d] = B[i, d]
    return -1


@njit(cache=True, nogil=True)
def reach_kernel(X, sup_rows, sup_cnt, mp_x, out):
    for p in range(sup_cnt.shape[0]):
        m = 0.0
        for i in range(sup_cnt[p]):
            d2 = 0.0
            for d in range(3):
                dd = X[sup_rows[p, i], d] - mp_x[p, d]
                d2 = d2 + dd * dd
            if d2 > m:
                m = d2
        out[p] = math.sqrt(m)


def update_supports(mps, node_ids, node_x, which, config: SearchConfig, lme: LmeParams,
                    cap: float, dim: int = 3) -> LinkedCellGrid:
    """Rebuild supports and shape data of ``mps`` rows listed in ``which``.

    ``node_ids``/``node_x`` describe every node resident on this worker,
    sorted by id. Raises :class:`SupportUnsatisfiableError` when a material
    point has no admissible support within ``cap``.
    """
    grid = build_grid(node_ids, node_x, cap)
    which = np.asarray(which, dtype=np.int64)
    if len(which) == 0:
        return grid
    n_mp = len(mps)
    K = max(mps.width, 2 * config.min_support)
    while True:
        cnt = mps.sup_count.copy()
        out_rows = np.full((n_mp, K), -1, dtype=np.int64)
        out_N = np.zeros((n_mp, K))
        out_B = np.zeros((n_mp, K, 3))
        radius = mps.support_radius.copy()
        reach = mps.reach.copy()
        status, bad, need = support_kernel(
            grid.keys, grid.starts, grid.rows, grid.positions, grid.origin, grid.cell_size,
            grid.dims, mps.x, mps.spacing, which, config.radius_factor, config.enlarge_factor,
            config.max_enlarge, config.min_support, cap, lme.gamma, lme.newton_tol,
            lme.newton_max_iter, dim, cnt, out_rows, out_N, out_B, radius, reach)
        if status == S_CAPACITY:
            K = max(need, 2 * K)
            continue
        break
    if status == S_UNSATISFIABLE:
        raise SupportUnsatisfiableError(
            f"material point {int(mps.ids[bad])} at {mps.x[bad]}: no admissible support "
            f"within radius {cap:.6g} (spacing {mps.spacing[bad]:.6g})")
    # rows outside ``which`` (e.g. fractured MPs) keep their support
    sel = which
    width = int(cnt[sel].max())
    mps.ensure_width(width)
    rows_sel = out_rows[sel, :width]
    valid = rows_sel >= 0
    ids_sel = np.where(valid, np.asarray(node_ids)[np.where(valid, rows_sel, 0)], PAD_ID)
    mps.sup_ids[sel] = PAD_ID
    mps.sup_N[sel] = 0.0
    mps.sup_B[sel] = 0.0
    mps.sup_ids[sel, :width] = ids_sel
    mps.sup_N[sel, :width] = out_N[sel, :width]
    mps.sup_B[sel, :width] = out_B[sel, :width]
    mps.sup_count[sel] = cnt[sel]
    mps.support_radius[sel] = radius[sel]
    mps.reach[sel] = reach[sel]
    mps.trim()
    return grid


def update_support_domains(sub, config: SearchConfig, lme: LmeParams,
                           cap: float) -> LinkedCellGrid | None:
    """Search step for every non-fractured owned material point of ``sub``.

    Returns the grid, or None when there is nothing to search.
    """
    local = sub.local_nodes()
    mps = sub.owned.mps
    which = np.flatnonzero(~mps.fractured)
    if len(which) == 0:
        return None
    return update_supports(mps, local.ids, local.x, which, config, lme, cap, sub.dim)
