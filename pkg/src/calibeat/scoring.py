"""Cumulative loss, refinement, calibration and pseudo-calibration.

Predictions are binned by exact value.  Real-valued points are keyed by a
fixed-precision decimal string (12 fractional digits per coordinate);
grid-valued predictions are keyed by their grid index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Optional, Sequence

import numpy as np

from .simplex import Brier, Loss, check_outcome

KEY_DIGITS = 12


def bin_key(p) -> str:
    """Canonical key of a simplex point: each coordinate at 12 fractional digits."""
    return ",".join(f"{x:.{KEY_DIGITS}f}" for x in np.asarray(p, dtype=np.float64))


def group_points(P: np.ndarray) -> np.ndarray:
    """Integer bin ids for the rows of ``P`` under the :func:`bin_key` identity.

    Ids are assigned in order of first appearance.
    """
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    uniq, inverse = np.unique(P, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    # exact-float duplicates are merged first; only distinct rows get formatted
    key_ids: dict[str, int] = {}
    remap = np.array([key_ids.setdefault(bin_key(u), len(key_ids)) for u in uniq], dtype=np.int64)
    return _first_appearance(remap[inverse])


def group_keys(keys: Sequence[Hashable]) -> np.ndarray:
    """Integer bin ids for an arbitrary sequence of hashable keys."""
    if isinstance(keys, np.ndarray) and keys.ndim == 2:
        return group_points(keys)
    if isinstance(keys, np.ndarray) and keys.dtype.kind in "iu":
        _, inv = np.unique(keys, return_inverse=True)
        return _first_appearance(inv.reshape(-1))
    ids: dict = {}
    return np.array([ids.setdefault(k, len(ids)) for k in keys], dtype=np.int64)


def _first_appearance(ids: np.ndarray) -> np.ndarray:
    if ids.size == 0:
        return ids.astype(np.int64)
    _, first = np.unique(ids, return_index=True)
    order = np.argsort(first)
    relabel = np.empty(order.size, dtype=np.int64)
    relabel[ids[first[order]]] = np.arange(order.size)
    return relabel[ids]


def bin_counts(ids: np.ndarray, outcomes: np.ndarray, K: int, n_bins: Optional[int] = None) -> np.ndarray:
    """Outcome-count matrix ``C[b, k]`` for bin ids and outcomes."""
    ids = np.asarray(ids, dtype=np.int64)
    outcomes = np.asarray(outcomes, dtype=np.int64)
    if n_bins is None:
        n_bins = int(ids.max()) + 1 if ids.size else 0
    flat = np.bincount(ids * K + outcomes, minlength=n_bins * K)
    return flat.reshape(n_bins, K).astype(np.float64)


class BinLedger:
    """Incremental per-bin statistics: visit count and outcome counts."""

    def __init__(self, K: int):
        self.K = K
        self.bins: dict[Hashable, list] = {}

    def record(self, key: Hashable, y: int) -> "BinLedger":
        y = check_outcome(y, self.K)
        entry = self.bins.get(key)
        if entry is None:
            entry = self.bins[key] = [0, np.zeros(self.K, dtype=np.int64)]
        entry[0] += 1
        entry[1][y] += 1
        return self

    def visits(self, key) -> int:
        return self.bins[key][0] if key in self.bins else 0

    def counts(self, key) -> np.ndarray:
        return self.bins[key][1].copy()

    def count_matrix(self) -> np.ndarray:
        if not self.bins:
            return np.zeros((0, self.K))
        return np.array([v[1] for v in self.bins.values()], dtype=np.float64)

    @property
    def rounds(self) -> int:
        return sum(v[0] for v in self.bins.values())

    def __len__(self):
        return len(self.bins)


def record(ledger: BinLedger, key: Hashable, y: int) -> BinLedger:
    return ledger.record(key, y)


@dataclass
class Transcript:
    """Per-round record of a run.

    ``forecasts`` is ``(T, N, K)``, ``predictions`` ``(T, K)``, ``outcomes``
    ``(T,)``.  Randomized grid-valued algorithms also carry ``pi`` -- the
    ``(T, M)`` prediction distributions over ``grid_points`` (``(M, K)``) --
    and ``prediction_index``, the sampled grid index per round.
    """

    forecasts: np.ndarray
    predictions: np.ndarray
    outcomes: np.ndarray
    pi: Optional[np.ndarray] = None
    grid_points: Optional[np.ndarray] = None
    prediction_index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.forecasts = np.asarray(self.forecasts, dtype=np.float64)
        if self.forecasts.ndim == 2:
            self.forecasts = self.forecasts[:, None, :]
        self.predictions = np.atleast_2d(np.asarray(self.predictions, dtype=np.float64))
        self.outcomes = np.asarray(self.outcomes, dtype=np.int64).reshape(-1)
        T, K = self.predictions.shape
        if self.forecasts.shape[0] != T or self.outcomes.shape[0] != T:
            raise ValueError("forecasts, predictions and outcomes disagree on T")
        if self.forecasts.shape[2] != K:
            raise ValueError("forecasts and predictions disagree on K")
        if np.any((self.outcomes < 0) | (self.outcomes >= K)):
            raise ValueError("outcome index out of range")
        if self.pi is not None:
            self.pi = np.asarray(self.pi, dtype=np.float64)
            if self.grid_points is None:
                raise ValueError("prediction distributions need grid_points")
            self.grid_points = np.asarray(self.grid_points, dtype=np.float64)
        if self.prediction_index is not None:
            self.prediction_index = np.asarray(self.prediction_index, dtype=np.int64)
            if self.pi is not None:
                mass = self.pi[np.arange(T), self.prediction_index]
                if np.any(mass <= 0):
                    raise ValueError("sampled grid point outside the support of pi")

    @property
    def T(self) -> int:
        return self.outcomes.shape[0]

    @property
    def K(self) -> int:
        return self.predictions.shape[1]

    @property
    def N(self) -> int:
        return self.forecasts.shape[1]

    def prediction_ids(self) -> np.ndarray:
        if self.prediction_index is not None:
            return group_keys(self.prediction_index)
        return group_points(self.predictions)

    def prefix(self, t: int) -> "Transcript":
        return Transcript(
            self.forecasts[:t],
            self.predictions[:t],
            self.outcomes[:t],
            None if self.pi is None else self.pi[:t],
            self.grid_points,
            None if self.prediction_index is None else self.prediction_index[:t],
        )


@dataclass
class ScoreReport:
    cumulative_loss: float
    refinement_self: float
    refinement_forecasters: list = field(default_factory=list)
    calibration: float = 0.0
    pseudo_calibration: Optional[float] = None


def per_round_losses(spec: Loss, predictions: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
    predictions = np.atleast_2d(predictions)
    outcomes = np.asarray(outcomes, dtype=np.int64)
    rows = np.arange(outcomes.size)
    if isinstance(spec, Brier):
        sq = (predictions * predictions).sum(axis=1)
        return sq - 2.0 * predictions[rows, outcomes] + 1.0
    if spec.name == "log":
        hit = predictions[rows, outcomes]
        if np.any(hit <= 0):
            from .simplex import DomainError

            raise DomainError("log loss undefined: zero probability on a realized outcome")
        return -np.log(hit)
    uniq_ids = group_points(predictions)
    first = np.unique(uniq_ids, return_index=True)[1]
    table = spec.loss_matrix(predictions[first])
    losses = table[uniq_ids, outcomes]
    if np.any(~np.isfinite(losses)):
        from .simplex import DomainError

        raise DomainError("loss is infinite on some round (zero probability on the outcome)")
    return losses


def cumulative_loss(spec: Loss, transcript: Transcript) -> float:
    if transcript.T == 0:
        raise ValueError("empty transcript")
    return float(per_round_losses(spec, transcript.predictions, transcript.outcomes).sum())


def refinement(spec: Loss, keys, outcomes, K: Optional[int] = None) -> float:
    """Sum over bins of the best constant prediction's total loss.

    ``keys`` is either a ``(T, K)`` array of points (binned by
    :func:`bin_key`) or any sequence of hashable bin keys.
    """
    outcomes = np.asarray(outcomes, dtype=np.int64)
    if outcomes.size == 0:
        raise ValueError("refinement of an empty stream")
    if isinstance(keys, np.ndarray) and keys.ndim == 2:
        K = keys.shape[1] if K is None else K
        ids = group_points(keys)
    else:
        ids = group_keys(keys)
    if len(ids) != outcomes.size:
        raise ValueError("keys and outcomes differ in length")
    if K is None:
        K = spec.points.shape[1] if hasattr(spec, "points") else max(int(outcomes.max()) + 1, 2)
    return spec.refinement_from_counts(bin_counts(ids, outcomes, K))


def calibration_error(spec: Loss, transcript: Transcript) -> float:
    """``L_T - R_T`` over the learner's own predictions."""
    L = cumulative_loss(spec, transcript)
    R = spec.refinement_from_counts(
        bin_counts(transcript.prediction_ids(), transcript.outcomes, transcript.K)
    )
    return L - R


def calibration_closed_form(spec: Loss, transcript: Transcript) -> float:
    """Closed forms: Brier ``sum_p n ||p - rho||^2``; log ``sum_p n KL(rho || p)``."""
    ids = transcript.prediction_ids()
    C = bin_counts(ids, transcript.outcomes, transcript.K)
    first = np.unique(ids, return_index=True)[1]
    points = transcript.predictions[first]
    n = C.sum(axis=1)
    rho = C / n[:, None]
    if isinstance(spec, Brier):
        return float((n * ((points - rho) ** 2).sum(axis=1)).sum())
    if spec.name == "log":
        from scipy.special import xlogy

        if np.any((rho > 0) & (points <= 0)):
            return float("inf")
        return float((n * (xlogy(rho, rho) - xlogy(rho, points)).sum(axis=1)).sum())
    raise ValueError(f"no closed form for {spec!r}")


def pseudo_calibration(spec: Loss, transcript: Transcript) -> float:
    """``sum_t sum_i pi_t(i) ||z_i - rho~_i||^2`` with pi-weighted outcome means rho~."""
    if transcript.pi is None:
        raise ValueError("pseudo-calibration needs per-round prediction distributions")
    if not isinstance(spec, Brier):
        raise ValueError("pseudo-calibration is defined for the Brier loss only")
    mass, W = weighted_grid_counts(transcript.pi, transcript.outcomes, transcript.K)
    Z = transcript.grid_points
    live = mass > 0
    rho = W[live] / mass[live, None]
    return float((mass[live] * ((Z[live] - rho) ** 2).sum(axis=1)).sum())


def weighted_grid_counts(pi: np.ndarray, outcomes: np.ndarray, K: int):
    """Total mass per grid point and the pi-weighted outcome counts ``W[i, k]``."""
    pi = np.atleast_2d(pi)
    mass = pi.sum(axis=0)
    W = np.zeros((pi.shape[1], K))
    for k in range(K):
        W[:, k] = pi[outcomes == k].sum(axis=0)
    return mass, W


def calibeating_gap(spec: Loss, transcript: Transcript, forecaster_index: int) -> float:
    if not 0 <= forecaster_index < transcript.N:
        raise IndexError(f"forecaster {forecaster_index} out of range (N={transcript.N})")
    L = cumulative_loss(spec, transcript)
    return L - refinement(spec, transcript.forecasts[:, forecaster_index, :], transcript.outcomes)


def score(spec: Loss, transcript: Transcript) -> ScoreReport:
    L = cumulative_loss(spec, transcript)
    K = calibration_error(spec, transcript)
    refs = [
        refinement(spec, transcript.forecasts[:, n, :], transcript.outcomes)
        for n in range(transcript.N)
    ]
    pk = None
    if transcript.pi is not None and isinstance(spec, Brier):
        pk = pseudo_calibration(spec, transcript)
    return ScoreReport(L, L - K, refs, K, pk)


# -- serialization ---------------------------------------------------------


def dump_ndjson(transcript: Transcript, fp) -> None:
    """One JSON object per round: ``t``, ``q``, ``pi`` (sparse, optional), ``p``, ``y``."""
    for t in range(transcript.T):
        rec = {"t": t + 1, "q": transcript.forecasts[t].tolist()}
        if transcript.pi is not None:
            nz = np.flatnonzero(transcript.pi[t])
            rec["pi"] = {str(int(i)): float(transcript.pi[t, i]) for i in nz}
        rec["p"] = transcript.predictions[t].tolist()
        rec["y"] = int(transcript.outcomes[t])
        fp.write(json.dumps(rec) + "\n")


def load_ndjson(lines: Iterable[str], grid_points=None) -> Transcript:
    forecasts, preds, ys, pis = [], [], [], []
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        forecasts.append(rec["q"])
        preds.append(rec["p"])
        ys.append(rec["y"])
        pis.append(rec.get("pi"))
    pi = index = None
    if any(x is not None for x in pis):
        if grid_points is None:
            raise ValueError("transcript carries pi but no grid_points were given")
        grid_points = np.asarray(grid_points, dtype=np.float64)
        pi = np.zeros((len(pis), len(grid_points)))
        for t, d in enumerate(pis):
            for i, w in (d or {}).items():
                pi[t, int(i)] = w
        lookup = {bin_key(z): i for i, z in enumerate(grid_points)}
        index = np.array([lookup[bin_key(p)] for p in preds])
    return Transcript(np.array(forecasts), np.array(preds), np.array(ys), pi, grid_points, index)
