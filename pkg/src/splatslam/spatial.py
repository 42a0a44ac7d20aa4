"""Exact fixed-radius neighbor search on a uniform hash grid."""
from __future__ import annotations

import numba as nb
import numpy as np

_OFFSET = 1 << 20  # cell coordinates are packed as three 21-bit fields
_EMPTY = -1


@nb.njit(cache=True)
def _pack(ix, iy, iz):
    return ((ix + _OFFSET) << 42) | ((iy + _OFFSET) << 21) | (iz + _OFFSET)


@nb.njit(cache=True)
def _slot(table_keys, key):
    mask = table_keys.shape[0] - 1
    h = (key * 0x9E3779B97F4A7C15) & 0x7FFFFFFFFFFFFFFF
    i = h & mask
    while table_keys[i] != _EMPTY and table_keys[i] != key:
        i = (i + 1) & mask
    return i


@nb.njit(cache=True)
def _near(points, head, nxt, table_keys, cell, p, r, span, skip_self):
    """True if some stored point lies strictly closer than r to p."""
    r2 = r * r
    cx = int(np.floor(p[0] / cell))
    cy = int(np.floor(p[1] / cell))
    cz = int(np.floor(p[2] / cell))
    for dx in range(-span, span + 1):
        for dy in range(-span, span + 1):
            for dz in range(-span, span + 1):
                s = _slot(table_keys, _pack(cx + dx, cy + dy, cz + dz))
                if table_keys[s] == _EMPTY:
                    continue
                j = head[s]
                while j != -1:
                    if j != skip_self:
                        d0 = points[j, 0] - p[0]
                        d1 = points[j, 1] - p[1]
                        d2 = points[j, 2] - p[2]
                        if d0 * d0 + d1 * d1 + d2 * d2 < r2:
                            return True
                    j = nxt[j]
    return False


@nb.njit(cache=True)
def _insert(points, head, nxt, table_keys, cell, start, stop, keep):
    for i in range(start, stop):
        if not keep[i - start]:
            continue
        p = points[i]
        key = _pack(int(np.floor(p[0] / cell)), int(np.floor(p[1] / cell)), int(np.floor(p[2] / cell)))
        s = _slot(table_keys, key)
        if table_keys[s] == _EMPTY:
            table_keys[s] = key
            head[s] = -1
        nxt[i] = head[s]
        head[s] = i


@nb.njit(cache=True)
def _insert_rejecting(points, head, nxt, table_keys, cell, start, stop, r, span, accepted):
    """Insert points[start:stop] one by one, skipping any closer than r to a stored point."""
    for i in range(start, stop):
        if _near(points, head, nxt, table_keys, cell, points[i], r, span, -1):
            accepted[i - start] = False
            continue
        accepted[i - start] = True
        p = points[i]
        key = _pack(int(np.floor(p[0] / cell)), int(np.floor(p[1] / cell)), int(np.floor(p[2] / cell)))
        s = _slot(table_keys, key)
        if table_keys[s] == _EMPTY:
            table_keys[s] = key
            head[s] = -1
        nxt[i] = head[s]
        head[s] = i


@nb.njit(cache=True)
def _has_neighbor_batch(points, head, nxt, table_keys, cell, queries, r, span, out):
    for i in range(queries.shape[0]):
        out[i] = _near(points, head, nxt, table_keys, cell, queries[i], r, span, -1)


@nb.njit(cache=True)
def _query(points, head, nxt, table_keys, cell, p, r, span, out):
    r2 = r * r
    n = 0
    cx = int(np.floor(p[0] / cell))
    cy = int(np.floor(p[1] / cell))
    cz = int(np.floor(p[2] / cell))
    for dx in range(-span, span + 1):
        for dy in range(-span, span + 1):
            for dz in range(-span, span + 1):
                s = _slot(table_keys, _pack(cx + dx, cy + dy, cz + dz))
                if table_keys[s] == _EMPTY:
                    continue
                j = head[s]
                while j != -1:
                    d0 = points[j, 0] - p[0]
                    d1 = points[j, 1] - p[1]
                    d2 = points[j, 2] - p[2]
                    if d0 * d0 + d1 * d1 + d2 * d2 < r2:
                        out[n] = j
                        n += 1
                    j = nxt[j]
    return n


class NeighborGrid:
    """Points hashed into cubic cells of side `cell`.

    Queries report points at distance strictly less than the radius, and are
    exact for any radius (the cell stencil widens as needed).
    """

    def __init__(self, cell: float, points: np.ndarray | None = None):
        if not cell > 0:
            raise ValueError("cell size must be positive")
        self.cell = float(cell)
        self._points = np.zeros((0, 3))
        self._n = 0
        self._table_keys = np.full(16, _EMPTY, dtype=np.int64)
        self._head = np.full(16, -1, dtype=np.int64)
        self._next = np.zeros(0, dtype=np.int64)
        self._cells = 0
        if points is not None and len(points):
            self.insert(points)

    def __len__(self) -> int:
        return self._n

    @property
    def points(self) -> np.ndarray:
        return self._points[: self._n]

    def _reserve(self, extra: int) -> None:
        need = self._n + extra
        if need > len(self._points):
            cap = max(need, 2 * len(self._points), 64)
            pts = np.zeros((cap, 3))
            pts[: self._n] = self._points[: self._n]
            nxt = np.full(cap, -1, dtype=np.int64)
            nxt[: self._n] = self._next[: self._n]
            self._points, self._next = pts, nxt
        # keep the table at most half full even if every new point opens a cell
        if 2 * (self._cells + extra) > len(self._table_keys):
            size = len(self._table_keys)
            while 2 * (self._cells + extra) > size:
                size *= 2
            self._rehash(size)

    def _rehash(self, size: int) -> None:
        self._table_keys = np.full(size, _EMPTY, dtype=np.int64)
        self._head = np.full(size, -1, dtype=np.int64)
        n = self._n
        self._next[:n] = -1
        _insert(self._points, self._head, self._next, self._table_keys, self.cell, 0, n, np.ones(n, dtype=np.bool_))

    def _span(self, r: float) -> int:
        return max(1, int(np.ceil(r / self.cell)))

    def _update_cell_count(self) -> None:
        self._cells = int((self._table_keys != _EMPTY).sum())

    def insert(self, points: np.ndarray, reject_radius: float | None = None) -> np.ndarray:
        """Add points; returns the accepted mask.

        With `reject_radius`, points are considered in order and a point is
        dropped when it lies closer than the radius to any stored point,
        including points accepted earlier in the same call.
        """
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        m = len(pts)
        if m == 0:
            return np.zeros(0, dtype=bool)
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        self._reserve(m)
        start = self._n
        self._points[start : start + m] = pts
        if reject_radius is None:
            accepted = np.ones(m, dtype=np.bool_)
            _insert(self._points, self._head, self._next, self._table_keys, self.cell, start, start + m, accepted)
        else:
            accepted = np.zeros(m, dtype=np.bool_)
            _insert_rejecting(self._points, self._head, self._next, self._table_keys, self.cell, start, start + m,
                              float(reject_radius), self._span(reject_radius), accepted)
        if not accepted.all():
            # compact: rejected points were never linked, so re-linking the kept ones is enough
            kept = pts[accepted]
            self._points[start : start + len(kept)] = kept
            self._n = start + len(kept)
            self._rehash(len(self._table_keys))
        else:
            self._n = start + m
        self._update_cell_count()
        return accepted

    def has_neighbor(self, queries: np.ndarray, radius: float) -> np.ndarray:
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        out = np.zeros(len(q), dtype=np.bool_)
        if self._n and len(q):
            _has_neighbor_batch(self._points, self._head, self._next, self._table_keys, self.cell, q,
                                float(radius), self._span(radius), out)
        return out

    def query_radius(self, point: np.ndarray, radius: float) -> np.ndarray:
        """Sorted indices of stored points closer than `radius` to `point`."""
        if self._n == 0:
            return np.zeros(0, dtype=np.int64)
        out = np.empty(self._n, dtype=np.int64)
        p = np.asarray(point, dtype=np.float64).reshape(3)
        k = _query(self._points, self._head, self._next, self._table_keys, self.cell, p, float(radius),
                   self._span(radius), out)
        return np.sort(out[:k])

    def nearest(self, point: np.ndarray) -> tuple[int, float]:
        """Index of and distance to the stored point closest to `point`.

        Radius queries grow until one returns a hit: every point within the
        radius is returned, so the closest hit is the global nearest neighbor.
        Very distant queries fall back to a linear scan.
        """
        if self._n == 0:
            raise ValueError("nearest() on an empty grid")
        p = np.asarray(point, dtype=np.float64).reshape(3)
        r = self.cell
        while self._span(r) <= 32:
            found = self.query_radius(p, r)
            if len(found):
                d = np.linalg.norm(self._points[found] - p, axis=1)
                k = int(np.argmin(d))
                return int(found[k]), float(d[k])
            r *= 2
        d = np.linalg.norm(self._points[: self._n] - p, axis=1)
        k = int(np.argmin(d))
        return k, float(d[k])
