"""Uniform composition grids on the simplex and unbiased barycentric rounding.

The grid of denominator ``m`` holds every point ``a / m`` with ``a`` a
composition of ``m`` into ``K`` nonnegative parts, listed in lexicographic
order of ``a``.  Rounding uses the Kuhn (Freudenthal) triangulation in
cumulative coordinates ``c_j = m * (q_1 + ... + q_j)``: the cell containing
``c`` is split by the descending order of the fractional parts, so the
rounding is supported on at most ``K`` adjacent vertices and its mean is
exactly ``q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_GRID_SIZE = 10**7


class GridCapacityError(ValueError):
    pass


def grid_size(K: int, m: int) -> int:
    return math.comb(m + K - 1, K - 1)


def compositions(m: int, K: int) -> np.ndarray:
    """All compositions of ``m`` into ``K`` nonnegative parts, lexicographic."""
    if K == 1:
        return np.array([[m]], dtype=np.int64)
    blocks = []
    for first in range(m + 1):
        rest = compositions(m - first, K - 1)
        blocks.append(np.column_stack([np.full(len(rest), first, dtype=np.int64), rest]))
    return np.vstack(blocks)


@dataclass
class SimplexGrid:
    K: int
    m: int
    compositions: np.ndarray
    points: np.ndarray = field(repr=False)
    _binom: np.ndarray = field(repr=False)

    @property
    def M(self) -> int:
        return len(self.points)

    @property
    def epsilon(self) -> float:
        return 1.0 / self.m

    def rank(self, comps) -> np.ndarray:
        """Lexicographic position of compositions (rows of ``comps``)."""
        comps = np.atleast_2d(np.asarray(comps, dtype=np.int64))
        K, m = self.K, self.m
        r = np.full(len(comps), m, dtype=np.int64)
        pos = np.zeros(len(comps), dtype=np.int64)
        B = self._binom
        for j in range(K - 1):
            d = K - j - 1
            a = comps[:, j]
            # compositions with a smaller j-th part: hockey-stick identity
            pos += B[r + d, d] - B[r - a + d, d]
            r = r - a
        return pos

    def index(self, point) -> int:
        a = np.rint(np.asarray(point, dtype=np.float64) * self.m).astype(np.int64)
        if a.sum() != self.m or np.any(a < 0) or np.max(np.abs(a / self.m - point)) > 1e-9:
            raise KeyError(f"{point} is not a vertex of the grid with m={self.m}")
        return int(self.rank(a[None, :])[0])

    def to_dict(self) -> dict:
        return {"K": self.K, "m": self.m}


def build_grid(K: int, epsilon: float) -> SimplexGrid:
    """Grid with denominator ``m = ceil(1 / epsilon)``."""
    if K < 2:
        raise ValueError("K must be at least 2")
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    m = math.ceil(1.0 / epsilon - 1e-9)
    return grid_from_denominator(K, m)


def grid_from_denominator(K: int, m: int) -> SimplexGrid:
    if m < 1:
        raise ValueError("denominator must be positive")
    M = grid_size(K, m)
    if M > MAX_GRID_SIZE:
        raise GridCapacityError(f"grid of size {M} exceeds the cap of {MAX_GRID_SIZE}")
    comps = compositions(m, K)
    binom = np.zeros((m + K + 1, K + 1), dtype=np.int64)
    for n in range(m + K + 1):
        for k in range(min(n, K) + 1):
            binom[n, k] = math.comb(n, k)
    return SimplexGrid(K, m, comps, comps / m, binom)


def round_many(grid: SimplexGrid, Q) -> tuple[np.ndarray, np.ndarray]:
    """Round each row of ``Q`` to a distribution over grid vertices.

    Returns ``(idx, w)``, both ``(n, K)``: vertex indices and weights.
    Zero-weight slots point at a valid vertex so they can be scattered
    safely.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    n, K = Q.shape
    m = grid.m
    c = m * np.cumsum(Q[:, : K - 1], axis=1)
    c = np.clip(np.maximum.accumulate(c, axis=1), 0.0, m)
    near = np.rint(c)
    snap = np.abs(c - near) <= 1e-13 * m
    c = np.where(snap, near, c)
    base = np.floor(c)
    frac = c - base
    # descending fractional part; ties resolved toward the larger coordinate
    rev = np.argsort(-frac[:, ::-1], axis=1, kind="stable")
    order = (K - 2) - rev
    f_sorted = np.take_along_axis(frac, order, axis=1)
    weights = np.empty((n, K))
    weights[:, 0] = 1.0 - f_sorted[:, 0]
    weights[:, 1 : K - 1] = f_sorted[:, :-1] - f_sorted[:, 1:]
    weights[:, K - 1] = f_sorted[:, -1]

    verts = np.empty((n, K, K - 1), dtype=np.int64)
    v = base.astype(np.int64)
    verts[:, 0] = v
    rows = np.arange(n)
    for j in range(1, K):
        v = v.copy()
        v[rows, order[:, j - 1]] += 1
        verts[:, j] = v
    # cumulative -> composition
    comps = np.empty((n, K, K), dtype=np.int64)
    comps[:, :, 0] = verts[:, :, 0]
    comps[:, :, 1 : K - 1] = np.diff(verts, axis=2)
    comps[:, :, K - 1] = m - verts[:, :, -1]
    valid = np.all(comps >= 0, axis=2) & (weights > 0)
    comps = np.where(valid[:, :, None], comps, comps[:, :1, :])
    weights = np.where(valid, weights, 0.0)
    idx = grid.rank(comps.reshape(n * K, K)).reshape(n, K)
    return idx, weights


def round_to_grid(grid: SimplexGrid, q) -> dict[int, float]:
    """Sparse rounding distribution ``{vertex index: weight}`` of a single point."""
    idx, w = round_many(grid, np.asarray(q, dtype=np.float64)[None, :])
    out: dict[int, float] = {}
    for i, wi in zip(idx[0], w[0]):
        if wi > 0:
            out[int(i)] = out.get(int(i), 0.0) + float(wi)
    return out


def dense(dist: dict[int, float], M: int) -> np.ndarray:
    v = np.zeros(M)
    for i, w in dist.items():
        v[i] += w
    return v
