"""Probability-simplex arithmetic and proper scoring losses.

Points on the simplex are plain float64 numpy arrays; :func:`simplex_point`
validates and (within tolerance) renormalizes them.  Outcomes are integer
indices ``0 <= y < K`` standing for the basis vectors ``e_y``.

Three losses are provided:

* :class:`Brier` -- ``||p - e_y||^2``
* :class:`LogLoss` -- ``-log p[y]``
* :class:`GridProper` -- an arbitrary loss tabulated on a finite set of
  predictions, checked for properness by enumeration at construction.
"""

from __future__ import annotations

import numpy as np
from scipy.special import xlogy

SUM_TOL = 1e-12


class DomainError(ValueError):
    """Raised when a loss is evaluated outside its domain (e.g. log of 0)."""


def simplex_point(weights, tol: float = SUM_TOL) -> np.ndarray:
    """Validate ``weights`` as a point of the simplex and return a float array.

    Vectors whose sum is within ``tol`` of one are renormalized; anything
    else (negative entries, K < 2, larger deviation) raises ``ValueError``.
    """
    p = np.array(weights, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError(f"simplex point needs a 1-d vector with K >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"simplex point has negative or non-finite weights: {p}")
    s = p.sum()
    if abs(s - 1.0) > tol:
        raise ValueError(f"simplex point sums to {s!r}, not 1")
    if s != 1.0:
        p /= s
    return p


def uniform(K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)


def basis(K: int, y: int) -> np.ndarray:
    e = np.zeros(K)
    e[y] = 1.0
    return e


def check_outcome(y, K: int) -> int:
    y = int(y)
    if not 0 <= y < K:
        raise ValueError(f"outcome {y} out of range for K={K}")
    return y


def entropy(p) -> float:
    """Shannon entropy in nats with the 0 log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    return float(-xlogy(p, p).sum())


def kl_divergence(p, q) -> float:
    """KL(p || q); infinite when q vanishes on the support of p."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((p > 0) & (q <= 0)):
        return float("inf")
    return float((xlogy(p, p) - xlogy(p, q)).sum())


class Loss:
    """Common surface for proper losses.

    Subclasses implement :meth:`loss_matrix` (losses of several predictions
    against every outcome) and :meth:`refinement_from_counts` (the summed
    per-bin optimum for a stack of outcome-count vectors).
    """

    name = "loss"

    def loss(self, p, y: int) -> float:
        p = np.asarray(p, dtype=np.float64)
        y = check_outcome(y, p.size)
        return float(self.loss_matrix(p[None, :])[0, y])

    def expected_loss(self, p, q) -> float:
        q = np.asarray(q, dtype=np.float64)
        row = self.loss_matrix(np.asarray(p, dtype=np.float64)[None, :])[0]
        support = q > 0
        return float(np.dot(q[support], row[support]))

    def loss_matrix(self, P: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def bin_optimum(self, counts) -> tuple[np.ndarray, float]:  # pragma: no cover - abstract
        raise NotImplementedError

    def refinement_from_counts(self, C: np.ndarray) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def loss_range(self) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.name}


def _check_counts(counts) -> np.ndarray:
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or np.any(c < 0):
        raise ValueError(f"counts must be a nonnegative vector, got {counts!r}")
    if c.sum() <= 0:
        raise ValueError("bin_optimum of an empty bin")
    return c


class Brier(Loss):
    """Squared Euclidean distance to the realized basis vector."""

    name = "brier"

    def loss_matrix(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=np.float64))
        return (P * P).sum(axis=1, keepdims=True) - 2.0 * P + 1.0

    def bin_optimum(self, counts):
        c = _check_counts(counts)
        n = c.sum()
        # sum_t ||rho - y_t||^2 = n - ||c||^2 / n
        return c / n, float(n - np.dot(c, c) / n)

    def refinement_from_counts(self, C):
        C = np.atleast_2d(np.asarray(C, dtype=np.float64))
        n = C.sum(axis=1)
        keep = n > 0
        return float((n[keep] - (C[keep] ** 2).sum(axis=1) / n[keep]).sum())

    @property
    def loss_range(self) -> float:
        return 2.0

    def __repr__(self):
        return "Brier()"


class LogLoss(Loss):
    """``-log p[y]``.  Zero probability on the realized outcome is a domain error."""

    name = "log"

    def loss(self, p, y):
        p = np.asarray(p, dtype=np.float64)
        y = check_outcome(y, p.size)
        if p[y] <= 0:
            raise DomainError(f"log loss undefined: p[{y}] = {p[y]!r}")
        return float(-np.log(p[y]))

    def expected_loss(self, p, q):
        p = np.asarray(p, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        support = q > 0
        if np.any(p[support] <= 0):
            raise DomainError("log loss undefined: p vanishes on the support of q")
        return float(-np.dot(q[support], np.log(p[support])))

    def loss_matrix(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=np.float64))
        with np.errstate(divide="ignore"):
            return -np.log(P)

    def bin_optimum(self, counts):
        c = _check_counts(counts)
        n = c.sum()
        rho = c / n
        return rho, float(n * entropy(rho))

    def refinement_from_counts(self, C):
        C = np.atleast_2d(np.asarray(C, dtype=np.float64))
        n = C.sum(axis=1)
        return float(xlogy(n, n).sum() - xlogy(C, C).sum())

    @property
    def loss_range(self) -> float:
        return float("inf")

    def __repr__(self):
        return "LogLoss()"


class GridProper(Loss):
    """A loss given by a table ``table[g, y]`` over finitely many predictions.

    ``points[g]`` is the simplex point that prediction ``g`` stands for.
    Properness is checked by enumeration: for every table row ``q`` the
    expected loss under ``q`` must be minimized (up to ``tol``) at ``q``.
    """

    name = "grid"

    def __init__(self, points, table, tol: float = 1e-12):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        table = np.atleast_2d(np.asarray(table, dtype=np.float64))
        if points.shape != table.shape:
            raise ValueError(f"points {points.shape} and table {table.shape} differ in shape")
        if not np.all(np.isfinite(table)):
            raise ValueError("grid loss table has non-finite entries")
        for row in points:
            simplex_point(row, tol=1e-9)
        expected = points @ table.T  # [q, g] = E_{y~q} table[g, y]
        own = np.diag(expected)
        bad = np.flatnonzero(own > expected.min(axis=1) + tol)
        if bad.size:
            raise ValueError(f"grid loss is not proper at table predictions {bad.tolist()}")
        self.points = points
        self.table = table
        self._index = {tuple(np.round(p, 12)): g for g, p in enumerate(points)}

    @classmethod
    def from_loss(cls, points, fn) -> "GridProper":
        """Tabulate ``fn(p, y)`` on ``points``."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        K = points.shape[1]
        table = np.array([[fn(p, y) for y in range(K)] for p in points])
        return cls(points, table)

    @classmethod
    def spherical(cls, points) -> "GridProper":
        """Spherical score ``-p[y] / ||p||``, bounded in [-1, 0]."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        table = -points / np.linalg.norm(points, axis=1, keepdims=True)
        return cls(points, table)

    def index_of(self, p) -> int:
        key = tuple(np.round(np.asarray(p, dtype=np.float64), 12))
        try:
            return self._index[key]
        except KeyError:
            raise DomainError(f"{p} is not a prediction of this grid loss") from None

    def loss_matrix(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=np.float64))
        return self.table[[self.index_of(p) for p in P]]

    def bin_optimum(self, counts):
        c = _check_counts(counts)
        totals = self.table @ c
        g = int(np.argmin(totals))
        return self.points[g].copy(), float(totals[g])

    def refinement_from_counts(self, C):
        C = np.atleast_2d(np.asarray(C, dtype=np.float64))
        C = C[C.sum(axis=1) > 0]
        if C.size == 0:
            return 0.0
        return float((C @ self.table.T).min(axis=1).sum())

    @property
    def loss_range(self) -> float:
        return float(self.table.max() - self.table.min())

    def to_dict(self):
        return {"kind": self.name, "points": self.points.tolist(), "table": self.table.tolist()}

    def __repr__(self):
        return f"GridProper(G={len(self.points)}, K={self.points.shape[1]})"


def make_loss(spec) -> Loss:
    """Build a loss from ``"brier"``, ``"log"`` or a ``{"kind": "grid", ...}`` mapping."""
    if isinstance(spec, Loss):
        return spec
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = str(spec.get("kind", "")).lower()
    if kind == "brier":
        return Brier()
    if kind == "log":
        return LogLoss()
    if kind == "grid":
        if "table" in spec:
            return GridProper(spec["points"], spec["table"])
        from .simulcal import build_grid

        grid = build_grid(int(spec["K"]), 1.0 / int(spec["m"]))
        base = spec.get("base", "spherical")
        if base == "spherical":
            return GridProper.spherical(grid.points)
        if base == "brier":
            return GridProper(grid.points, Brier().loss_matrix(grid.points))
        raise ValueError(f"unknown grid loss base {base!r}")
    raise ValueError(f"unknown loss kind {kind!r}")


def loss(spec: Loss, p, y: int) -> float:
    return spec.loss(p, y)


def expected_loss(spec: Loss, p, q) -> float:
    return spec.expected_loss(p, q)


def bin_optimum(spec: Loss, counts) -> tuple[np.ndarray, float]:
    return spec.bin_optimum(counts)
