"""Simultaneous calibeating and calibration for the Brier loss.

Pieces:

* grid discretization and unbiased rounding (re-exported from :mod:`.grid`);
* :class:`BMReduction` -- one weighted-FTL learner per grid vertex, whose
  rounded predictions form a column-stochastic remapping matrix ``A_t``;
* stationary-distribution solvers for column-stochastic matrices;
* :class:`SimulEngine` -- mixes ``A_t`` with the rank-one matrix of a
  rounded reference prediction using the lopsided two-expert weight, then
  samples the prediction from the stationary distribution of the mix.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .calibeating import ProtocolError
from .grid import SimplexGrid, build_grid, dense, grid_from_denominator, round_many, round_to_grid
from .learners import Lopsided
from .simplex import Brier, check_outcome

__all__ = [
    "SimplexGrid", "build_grid", "grid_from_denominator", "round_to_grid", "round_many", "dense",
    "StationaryError", "stationary", "residual", "mixture_stationary", "BMReduction", "SimulEngine",
    "epsilon_schedule",
]

COLUMN_TOL = 1e-12
RESIDUAL_TOL = 1e-10
DAMPING = 1e-12


class StationaryError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def _check_column_stochastic(C: np.ndarray) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"need a square matrix, got shape {C.shape}")
    if np.any(C < 0):
        raise ValueError("matrix has negative entries")
    dev = np.abs(C.sum(axis=0) - 1.0).max()
    if dev > COLUMN_TOL:
        raise ValueError(f"columns do not sum to 1 (max deviation {dev:.3e})")
    return C


def residual(C: np.ndarray, pi: np.ndarray) -> float:
    return float(np.abs(C @ pi - pi).sum())


def _gth(P: np.ndarray) -> np.ndarray:
    """Grassmann-Taksar-Heyman elimination for a row-stochastic irreducible ``P``."""
    A = P.copy()
    n = A.shape[0]
    for k in range(n - 1, 0, -1):
        s = A[k, :k].sum()
        A[:k, k] /= s
        A[:k, :k] += np.outer(A[:k, k], A[k, :k])
    pi = np.zeros(n)
    pi[0] = 1.0
    for k in range(1, n):
        pi[k] = pi[:k] @ A[:k, k]
    return pi / pi.sum()


def stationary(C, method: str = "gth", damping: float = DAMPING, tol: float = RESIDUAL_TOL,
               max_iter: int = 10**6) -> np.ndarray:
    """A stationary distribution ``pi = C pi`` of a column-stochastic matrix.

    The chain is damped toward uniform, ``(1 - damping) C + damping / M``,
    which makes the fixed point unique (uniform for the identity) and moves
    the undamped residual by at most ``2 * damping``.  ``method`` is
    ``"gth"`` (direct elimination) or ``"power"`` (power iteration from
    uniform).  Raises :class:`StationaryError` when ``||C pi - pi||_1 > tol``.
    """
    C = _check_column_stochastic(C)
    M = C.shape[0]
    D = (1.0 - damping) * C + damping / M
    if method == "gth":
        pi = _gth(D.T)
    elif method == "power":
        pi = np.full(M, 1.0 / M)
        for _ in range(max_iter):
            nxt = D @ pi
            nxt /= nxt.sum()
            done = np.abs(nxt - pi).sum() <= tol / 10
            pi = nxt
            if done:
                break
    else:
        raise ValueError(f"unknown method {method!r}")
    r = residual(C, pi)
    if r > tol:
        raise StationaryError("stationary distribution did not converge", r)
    return pi


def mixture_stationary(A: np.ndarray, b: np.ndarray, w: float, tol: float = RESIDUAL_TOL) -> tuple[np.ndarray, float]:
    """Stationary distribution of ``C = w A + (1 - w) b 1^T`` and its residual.

    For ``w < 1`` the fixed point is unique: ``pi = (1 - w)(I - w A)^{-1} b``.
    Near ``w = 1`` it falls back to :func:`stationary` on the explicit matrix.
    """
    M = A.shape[0]
    if w < 1.0 - 1e-6:
        pi = (1.0 - w) * np.linalg.solve(np.eye(M) - w * A, b)
        pi = np.maximum(pi, 0.0)
        pi /= pi.sum()
        r = float(np.abs(w * (A @ pi) + (1.0 - w) * b - pi).sum())
        if r <= tol:
            return pi, r
    C = w * A + (1.0 - w) * b[:, None]
    pi = stationary(C, tol=tol)
    return pi, residual(C, pi)


class BMReduction:
    """Swap-regret learner over grid vertices (weighted FTL per vertex).

    ``W[i]`` holds learner ``i``'s pi-weighted outcome counts; its FTL point
    is ``W[i] / mass[i]`` (uniform while ``mass[i] == 0``).
    """

    def __init__(self, grid: SimplexGrid):
        self.grid = grid
        self.W = np.zeros((grid.M, grid.K))
        self.mass = np.zeros(grid.M)

    def learner_predictions(self) -> np.ndarray:
        Q = np.full((self.grid.M, self.grid.K), 1.0 / self.grid.K)
        live = self.mass > 0
        Q[live] = self.W[live] / self.mass[live, None]
        return Q

    def predict(self) -> np.ndarray:
        """Column ``i`` of the returned matrix is the rounding of learner ``i``'s point."""
        M, K = self.grid.M, self.grid.K
        idx, w = round_many(self.grid, self.learner_predictions())
        cols = np.repeat(np.arange(M), K)
        flat = np.bincount(idx.ravel() * M + cols, weights=w.ravel(), minlength=M * M)
        return flat.reshape(M, M)

    def update(self, y: int, pi: np.ndarray) -> None:
        y = check_outcome(y, self.grid.K)
        pi = np.asarray(pi, dtype=np.float64)
        self.W[:, y] += pi
        self.mass += pi

    def state_dict(self):
        return {"W": self.W.tolist(), "mass": self.mass.tolist()}


def epsilon_schedule(schedule, T: int, K: int) -> float:
    """``"binary"``: sqrt(ln T / T); ``"multiclass"``: (ln T / T)^(1/(K+1)); or a number."""
    if isinstance(schedule, (int, float)):
        return float(schedule)
    ratio = math.log(T) / T
    if schedule in ("binary", "sqrt_log"):
        return math.sqrt(ratio)
    if schedule in ("multiclass", "root_log"):
        return ratio ** (1.0 / (K + 1))
    try:
        return float(schedule)
    except ValueError:
        raise ValueError(f"unknown epsilon schedule {schedule!r}") from None


class SimulEngine:
    """Calibrated predictions that track a reference engine (Brier loss only).

    ``reference`` is any engine exposing ``predict_round(forecasts, keys)``
    and ``update_round(forecasts, y, keys)``.  With ``reference=None`` the
    engine is the plain calibrated BM forecaster (weight fixed at 1).
    """

    def __init__(self, grid: SimplexGrid, reference=None, lopsided: Optional[Lopsided] = None,
                 rng=None, residual_tol: float = RESIDUAL_TOL):
        self.grid = grid
        self.loss = Brier()
        self.reference = reference
        self.lopsided = lopsided
        if reference is not None and lopsided is None:
            raise ValueError("a reference engine needs a lopsided aggregator")
        self.bm = BMReduction(grid)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.residual_tol = residual_tol
        self.grid_losses = self.loss.loss_matrix(grid.points)  # (M, K)
        self._round = None

    def weight(self) -> float:
        return 1.0 if self.reference is None else self.lopsided.weight()

    def _mix(self, A, b_dense):
        w = self.weight()
        if b_dense is None:
            pi = stationary(A, tol=self.residual_tol)
            return w, pi, residual(A, pi)
        pi, r = mixture_stationary(A, b_dense, w, self.residual_tol)
        if r > self.residual_tol:
            raise StationaryError("stationary residual above tolerance", r)
        return w, pi, r

    def step(self, forecasts, keys=None) -> tuple[np.ndarray, np.ndarray]:
        """Return the sampled prediction and the distribution ``pi`` it was drawn from."""
        if self._round is not None:
            raise ProtocolError("step called twice without update")
        A = self.bm.predict()
        b = None
        if self.reference is not None:
            ref = self.reference.predict_round(forecasts, keys)
            if isinstance(ref, tuple):
                ref = ref[0]
            b = dense(round_to_grid(self.grid, ref), self.grid.M)
        w, pi, r = self._mix(A, b)
        idx = _sample(pi, self.rng.random())
        self._round = (A, b, pi, idx, w, r)
        return self.grid.points[idx].copy(), pi

    def update(self, forecasts, y: int, keys=None) -> dict:
        if self._round is None:
            raise ProtocolError("update without a preceding step")
        A, b, pi, idx, w, r = self._round
        y = check_outcome(y, self.grid.K)
        self.bm.update(y, pi)
        col = self.grid_losses[:, y]
        g1 = float((A @ pi) @ col)
        g2 = None
        if self.reference is not None:
            self.reference.update_round(forecasts, y, keys)
            g2 = float(b @ col)
            self.lopsided.update(g1, g2)
        self._round = None
        return {"index": idx, "w": w, "residual": r, "bm_loss": g1, "ref_loss": g2,
                "expected_loss": float(pi @ col)}

    def run_batch(self, forecasts, outcomes, keys=None, reference_predictions=None) -> dict:
        """Run an oblivious stream.

        The reference never sees ``pi``, so its predictions are computed
        up front (or passed in); the BM/lopsided loop then runs per round.
        """
        if self._round is not None:
            raise ProtocolError("run_batch called mid-round")
        outcomes = np.asarray(outcomes, dtype=np.int64)
        T, M, K = outcomes.size, self.grid.M, self.grid.K
        ref_idx = ref_w = None
        if self.reference is not None:
            if reference_predictions is None:
                reference_predictions = _reference_batch(self.reference, forecasts, outcomes, keys)
            ref_idx, ref_w = round_many(self.grid, reference_predictions)
        pis = np.empty((T, M))
        index = np.empty(T, dtype=np.int64)
        ws = np.empty(T)
        res = np.empty(T)
        bm_loss = np.empty(T)
        ref_loss = np.full(T, np.nan)
        L = self.grid_losses
        u = self.rng.random(T)
        for t in range(T):
            y = outcomes[t]
            A = self.bm.predict()
            b = None
            if ref_idx is not None:
                b = np.bincount(ref_idx[t], weights=ref_w[t], minlength=M)
            w, pi, r = self._mix(A, b)
            index[t] = _sample(pi, u[t])
            col = L[:, y]
            g1 = float((A @ pi) @ col)
            self.bm.update(y, pi)
            if b is not None:
                g2 = float(b @ col)
                self.lopsided.update(g1, g2)
                ref_loss[t] = g2
            pis[t], ws[t], res[t], bm_loss[t] = pi, w, r, g1
        rows = np.arange(T)
        return {
            "predictions": self.grid.points[index],
            "index": index,
            "pi": pis,
            "w": ws,
            "residual": res,
            "bm_losses": bm_loss,
            "ref_losses": ref_loss,
            "expected_losses": (pis * L[:, outcomes].T).sum(axis=1),
            "reference_predictions": reference_predictions,
            "realized_losses": L[index, outcomes] if T else np.zeros(0),
            "rows": rows,
        }

    def snapshot(self) -> dict:
        snap = {
            "grid": self.grid.to_dict(),
            "bm": self.bm.state_dict(),
            "lopsided": None if self.lopsided is None else self.lopsided.state_dict(),
            "rng": _jsonable(self.rng.bit_generator.state),
        }
        if self.reference is not None and hasattr(self.reference, "snapshot"):
            snap["reference"] = self.reference.snapshot()
        return snap

    def load_state(self, snap: dict) -> None:
        """Restore BM, lopsided and RNG state from :meth:`snapshot` output.

        The reference engine is restored by its own ``restore``.
        """
        self.bm.W = np.array(snap["bm"]["W"], dtype=np.float64)
        self.bm.mass = np.array(snap["bm"]["mass"], dtype=np.float64)
        if snap["lopsided"] is not None:
            self.lopsided.log_s = snap["lopsided"]["log_s"]
        state = snap["rng"]
        self.rng.bit_generator.state = _from_jsonable(state)


def _reference_batch(reference, forecasts, outcomes, keys):
    forecasts = np.asarray(forecasts, dtype=np.float64)
    if hasattr(reference, "engines"):
        return reference.run_batch(forecasts, outcomes, keys)["predictions"]
    f0 = forecasts[:, 0] if forecasts.ndim == 3 else forecasts
    return reference.run_batch(f0, outcomes, None if keys is None else np.asarray(keys)[:, 0])


def _sample(pi: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(np.cumsum(pi), u, side="right"))
    idx = min(idx, len(pi) - 1)
    while pi[idx] <= 0:  # cumsum rounding can land on an empty slot
        idx -= 1
    return idx


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
