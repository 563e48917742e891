"""Scenarios, experiment execution, oracles and rate fitting.

Every scenario reduces to a *layout*: ``C`` latent cells, each with an
outcome distribution and one forecast per forecaster, plus a rule choosing
the cell of each round.  Streams are drawn from a counter-based generator
(Philox) that consumes exactly four uniforms per round, so round ``t`` of
replicate ``r`` can be regenerated on its own.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calibeating import CalibeatingEngine
from .learners import Lopsided, learner_factory, parse_kind
from .multicalibeating import MultiEngine, make_aggregator
from .scoring import bin_counts, group_points, per_round_losses, weighted_grid_counts
from .simplex import Brier, Loss, make_loss, simplex_point
from .simulcal import SimulEngine, build_grid, epsilon_schedule

UNIFORMS_PER_ROUND = 4
SCENARIO_STREAM, ALGORITHM_STREAM = 0, 1
DECOMPOSITION_TOL = 1e-9


class ConfigError(ValueError):
    def __init__(self, fld: str, message: str):
        super().__init__(f"{fld}: {message}")
        self.field = fld


class RunAbort(RuntimeError):
    def __init__(self, message: str, round_index: Optional[int] = None):
        where = "" if round_index is None else f" at round {round_index}"
        super().__init__(f"{message}{where}")
        self.round_index = round_index


# -- scenarios ------------------------------------------------------------------


@dataclass
class Layout:
    forecasts: np.ndarray  # (N, C, K)
    outcome_dists: np.ndarray  # (C, K)
    schedule: str  # round_robin | random | periodic
    period: int = 1

    def pick_cells(self, ts: np.ndarray, u: np.ndarray) -> np.ndarray:
        C = self.outcome_dists.shape[0]
        if self.schedule == "round_robin":
            return ts % C
        if self.schedule == "periodic":
            return (ts // self.period) % C
        return np.minimum((u * C).astype(np.int64), C - 1)


def _spread_points(Q: int, K: int, structure_seed: int) -> np.ndarray:
    """``Q`` distinct forecast values: evenly spaced for K=2, Dirichlet draws otherwise."""
    if K == 2:
        p = (np.arange(Q) + 0.5) / Q
        return np.column_stack([p, 1.0 - p])
    rng = np.random.default_rng([structure_seed, Q, K])
    P = np.round(rng.dirichlet(np.ones(K), size=Q), 6)
    P[:, -1] = 1.0 - P[:, :-1].sum(axis=1)
    return P


def _points(raw, fld: str, K: Optional[int] = None) -> np.ndarray:
    try:
        P = np.array([simplex_point(p) for p in raw])
    except (ValueError, TypeError) as exc:
        raise ConfigError(fld, str(exc)) from None
    if P.ndim != 2 or len(P) == 0:
        raise ConfigError(fld, "needs a nonempty list of points")
    if K is not None and P.shape[1] != K:
        raise ConfigError(fld, f"points have {P.shape[1]} coordinates, expected {K}")
    return P


@dataclass
class IidBinned:
    """One forecaster; bin ``b`` forecasts ``bin_forecasts[b]``, outcomes i.i.d. from its distribution."""

    bin_forecasts: np.ndarray
    bin_outcome_dists: np.ndarray
    schedule: str = "random"
    kind = "iid_binned"
    spread_params: Optional[dict] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.bin_forecasts = _points(self.bin_forecasts, "scenario.bin_forecasts")
        self.bin_outcome_dists = _points(self.bin_outcome_dists, "scenario.bin_outcome_dists", self.K)
        if len(self.bin_forecasts) != len(self.bin_outcome_dists):
            raise ConfigError("scenario.bin_outcome_dists", "must have one distribution per bin")
        if self.schedule not in ("random", "round_robin"):
            raise ConfigError("scenario.schedule", f"unknown schedule {self.schedule!r}")

    @classmethod
    def spread(cls, Q: int, K: int = 2, schedule: str = "random", structure_seed: int = 0) -> "IidBinned":
        """``Q`` calibrated bins (each bin's outcome distribution equals its forecast)."""
        P = _spread_points(Q, K, structure_seed)
        return cls(P, P.copy(), schedule, {"Q": Q, "K": K, "structure_seed": structure_seed})

    @property
    def K(self) -> int:
        return self.bin_forecasts.shape[1]

    N = 1

    def layout(self) -> Layout:
        return Layout(self.bin_forecasts[None], self.bin_outcome_dists, self.schedule)

    def to_dict(self) -> dict:
        if self.spread_params is not None:
            return {"kind": self.kind, **self.spread_params, "schedule": self.schedule}
        return {"kind": self.kind, "bin_forecasts": self.bin_forecasts.tolist(),
                "bin_outcome_dists": self.bin_outcome_dists.tolist(), "schedule": self.schedule}


@dataclass
class MultiForecaster:
    """``N`` calibrated forecasters of decreasing informativeness over shared latent cells.

    Cells carry distinct outcome distributions.  Forecaster ``n`` sorts the
    cells by a blend of their true order and a private random order (blend
    weight ``n / (N - 1)``), cuts the sorted list into ``Q`` equal groups and
    forecasts each group's average distribution.
    """

    N: int
    Q: int
    K: int = 2
    cells: Optional[int] = None
    schedule: str = "random"
    structure_seed: int = 0
    kind = "multi"

    def __post_init__(self):
        for name in ("N", "Q", "K"):
            if not isinstance(getattr(self, name), (int, np.integer)) or getattr(self, name) < 1:
                raise ConfigError(f"scenario.{name}", "must be a positive integer")
        if self.K < 2:
            raise ConfigError("scenario.K", "must be at least 2")
        if self.cells is None:
            self.cells = 4 * self.Q
        if self.cells < self.Q:
            raise ConfigError("scenario.cells", "need at least Q cells")
        if self.schedule not in ("random", "round_robin"):
            raise ConfigError("scenario.schedule", f"unknown schedule {self.schedule!r}")

    def layout(self) -> Layout:
        C = self.cells
        D = _spread_points(C, self.K, self.structure_seed)
        rank = np.argsort(np.argsort(D[:, 0], kind="stable"), kind="stable").astype(np.float64)
        rng = np.random.default_rng([self.structure_seed, self.N, self.Q, C])
        F = np.empty((self.N, C, self.K))
        for n in range(self.N):
            lam = n / (self.N - 1) if self.N > 1 else 0.0
            score = (1 - lam) * rank + lam * rng.permutation(C)
            order = np.argsort(score, kind="stable")
            group = np.empty(C, dtype=np.int64)
            group[order] = np.arange(C) * self.Q // C
            for g in range(self.Q):
                F[n, group == g] = D[group == g].mean(axis=0)
        return Layout(F, D, self.schedule)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "N": self.N, "Q": self.Q, "K": self.K, "cells": self.cells,
                "schedule": self.schedule, "structure_seed": self.structure_seed}


@dataclass
class AdversarialFlip:
    """Deterministic outcomes cycling through ``e_0, ..., e_{K-1}`` every ``period`` rounds; uniform forecast."""

    period: int
    K: int = 2
    kind = "adversarial_flip"
    N = 1

    def __post_init__(self):
        if self.period < 1:
            raise ConfigError("scenario.period", "must be positive")
        if self.K < 2:
            raise ConfigError("scenario.K", "must be at least 2")

    def layout(self) -> Layout:
        F = np.full((1, self.K, self.K), 1.0 / self.K)
        return Layout(F, np.eye(self.K), "periodic", self.period)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "period": self.period, "K": self.K}


@dataclass
class LowerBoundStyle:
    """``bins`` distinct forecasts visited round-robin; every outcome is a fair coin."""

    bins: int
    K: int = 2
    kind = "lower_bound"
    N = 1

    def __post_init__(self):
        if self.bins < 1:
            raise ConfigError("scenario.bins", "must be positive")

    def layout(self) -> Layout:
        F = _spread_points(self.bins, self.K, 0)
        D = np.full((self.bins, self.K), 1.0 / self.K)
        return Layout(F[None], D, "round_robin")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bins": self.bins, "K": self.K}


SCENARIOS = {c.kind: c for c in (IidBinned, MultiForecaster, AdversarialFlip, LowerBoundStyle)}


def scenario_from_dict(d: dict):
    if not isinstance(d, dict):
        raise ConfigError("scenario", "must be a mapping")
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in SCENARIOS:
        raise ConfigError("scenario.kind", f"unknown scenario {kind!r} (expected one of {', '.join(SCENARIOS)})")
    if kind == "iid_binned" and "Q" in d:
        extra = set(d) - {"Q", "K", "schedule", "structure_seed"}
        if extra:
            raise ConfigError("scenario", f"unknown fields {sorted(extra)}")
        return IidBinned.spread(int(d["Q"]), int(d.get("K", 2)), d.get("schedule", "random"),
                                int(d.get("structure_seed", 0)))
    if kind == "iid_binned" and "bin_outcome_dists" not in d and "bin_forecasts" in d:
        d["bin_outcome_dists"] = d["bin_forecasts"]
    try:
        return SCENARIOS[kind](**d)
    except TypeError as exc:
        raise ConfigError("scenario", str(exc)) from None


# -- streams ----------------------------------------------------------------------


def stream_generator(seed: int, replicate: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replicate), stream])))


@dataclass
class Stream:
    forecasts: np.ndarray  # (T, N, K)
    outcome_dists: np.ndarray  # (T, K)
    outcomes: np.ndarray  # (T,)
    cells: np.ndarray  # (T,)

    @property
    def T(self) -> int:
        return len(self.outcomes)


def _draw(layout: Layout, ts: np.ndarray, u: np.ndarray) -> Stream:
    cells = layout.pick_cells(ts, u[:, 0])
    dists = layout.outcome_dists[cells]
    cdf = np.cumsum(dists, axis=1)
    y = (cdf <= u[:, 1:2]).sum(axis=1)
    # never land on a zero-probability outcome when the cdf rounds below 1
    K = dists.shape[1]
    y = np.minimum(y, K - 1)
    bad = dists[np.arange(len(y)), y] <= 0
    if np.any(bad):
        y[bad] = K - 1 - np.argmax(dists[bad][:, ::-1] > 0, axis=1)
    forecasts = np.transpose(layout.forecasts[:, cells], (1, 0, 2))
    return Stream(forecasts, dists, y.astype(np.int64), cells)


def generate(scenario, T: int, seed: int, replicate: int = 0) -> Stream:
    """The oblivious stream: a pure function of (scenario, T, seed, replicate)."""
    if T < 1:
        raise ConfigError("T", "must be at least 1")
    u = stream_generator(seed, replicate, SCENARIO_STREAM).random((T, UNIFORMS_PER_ROUND))
    return _draw(scenario.layout(), np.arange(T), u)


def generate_round(scenario, t: int, seed: int, replicate: int = 0) -> Stream:
    """Round ``t`` (0-based) regenerated in isolation by skipping the counter ahead."""
    bg = np.random.Philox(np.random.SeedSequence([int(seed), int(replicate), SCENARIO_STREAM]))
    bg.advance(t)
    u = np.random.Generator(bg).random((1, UNIFORMS_PER_ROUND))
    return _draw(scenario.layout(), np.array([t]), u)


# -- algorithm specs ----------------------------------------------------------------

ENGINES = ("calibeat", "multi", "simul")
_ALG_KEYS = {"engine", "learner", "aggregator", "mode", "eps", "reference"}


def parse_algorithm(spec) -> dict:
    """``"engine=simul;learner=ftl_brier;eps=binary"`` (or a mapping) -> normalized mapping."""
    if isinstance(spec, str):
        d = {}
        for item in filter(None, (s.strip() for s in spec.split(";"))):
            k, eq, v = item.partition("=")
            if not eq:
                raise ConfigError("algorithm", f"malformed item {item!r}")
            d[k.strip()] = v.strip()
    elif isinstance(spec, dict):
        d = dict(spec)
    else:
        raise ConfigError("algorithm", "must be a string or a mapping")
    extra = set(d) - _ALG_KEYS
    if extra:
        raise ConfigError("algorithm", f"unknown keys {sorted(extra)}")
    engine = d.get("engine", "calibeat")
    if engine not in ENGINES:
        raise ConfigError("algorithm.engine", f"unknown engine {engine!r}")
    out = {"engine": engine, "learner": str(d.get("learner", "ftl_brier"))}
    if engine == "multi":
        out["mode"] = d.get("mode")
        out["aggregator"] = d.get("aggregator")
    if engine == "simul":
        eps = d.get("eps", "binary")
        try:
            eps = float(eps)
        except (TypeError, ValueError):
            pass
        out["eps"] = eps
        out["reference"] = d.get("reference", "calibeat")
        if out["reference"] not in ("calibeat", "multi", "none"):
            raise ConfigError("algorithm.reference", f"unknown reference {out['reference']!r}")
        if out["reference"] == "multi":
            out["aggregator"] = d.get("aggregator")
    return out


def algorithm_string(alg: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in alg.items() if v is not None)


@dataclass
class RunConfig:
    scenario: object
    T: int
    seed: int = 0
    algorithm: dict = field(default_factory=lambda: parse_algorithm("engine=calibeat"))
    loss: object = "brier"
    metrics_stride: Optional[int] = None  # None: powers of two; 0: final only
    replicates: int = 1
    name: str = ""

    def __post_init__(self):
        if isinstance(self.scenario, dict):
            self.scenario = scenario_from_dict(self.scenario)
        self.algorithm = parse_algorithm(self.algorithm)
        if not isinstance(self.T, (int, np.integer)) or self.T < 1:
            raise ConfigError("T", "must be a positive integer")
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        if not isinstance(self.replicates, (int, np.integer)) or self.replicates < 1:
            raise ConfigError("replicates", "must be a positive integer")
        s = self.metrics_stride
        if s is not None and (not isinstance(s, (int, np.integer)) or s < 0 or (s > 0 and self.T % s)):
            raise ConfigError("metrics_stride", "must divide T, or be 0 for final-only")
        try:
            self.loss_obj = make_loss(self.loss)
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError("loss", str(exc)) from None
        self._check_algorithm()

    def _check_algorithm(self):
        alg = self.algorithm
        K = self.scenario.layout().outcome_dists.shape[1]
        if hasattr(self.loss_obj, "points") and self.loss_obj.points.shape[1] != K:
            raise ConfigError("loss", f"grid loss has K={self.loss_obj.points.shape[1]}, scenario has K={K}")
        try:
            learner_factory(alg["learner"], K, self.loss_obj, np.random.default_rng(0))
        except (ValueError, TypeError) as exc:
            raise ConfigError("algorithm.learner", str(exc)) from None
        if alg["engine"] == "multi" or alg.get("reference") == "multi":
            mode = alg.get("mode")
            if mode is None:
                mode = "sampling" if hasattr(self.loss_obj, "table") else "mixture"
            try:
                make_aggregator(alg.get("aggregator"), mode, 2, self.loss_obj, self.T)
            except ValueError as exc:
                raise ConfigError("algorithm.aggregator", str(exc)) from None
        if alg["engine"] == "simul":
            if not isinstance(self.loss_obj, Brier):
                raise ConfigError("loss", "the simultaneous engine supports the Brier loss only")
            try:
                eps = epsilon_schedule(alg["eps"], max(self.T, 2), K)
            except ValueError as exc:
                raise ConfigError("algorithm.eps", str(exc)) from None
            if not 0 < eps < 1:
                raise ConfigError("algorithm.eps", f"epsilon {eps} outside (0, 1)")

    @property
    def K(self) -> int:
        return self.scenario.layout().outcome_dists.shape[1]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "scenario": self.scenario.to_dict(),
            "T": int(self.T),
            "seed": int(self.seed),
            "algorithm": dict(self.algorithm),
            "loss": self.loss_obj.to_dict() if not isinstance(self.loss, str) else self.loss,
            "metrics_stride": self.metrics_stride,
            "replicates": int(self.replicates),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config", "must be a mapping")
        allowed = {"name", "scenario", "T", "seed", "algorithm", "loss", "metrics_stride", "replicates"}
        extra = set(d) - allowed
        if extra:
            raise ConfigError("config", f"unknown fields {sorted(extra)}")
        for req in ("scenario", "T"):
            if req not in d:
                raise ConfigError(req, "missing")
        stride = d.get("metrics_stride")
        if stride in ("pow2", "powers_of_two"):
            stride = None
        return cls(scenario=d["scenario"], T=d["T"], seed=d.get("seed", 0),
                   algorithm=d.get("algorithm", "engine=calibeat"), loss=d.get("loss", "brier"),
                   metrics_stride=stride, replicates=d.get("replicates", 1), name=d.get("name", ""))

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("seed")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def setting(self) -> str:
        alg = self.algorithm
        parts = [alg["engine"], alg["learner"]]
        if alg.get("reference"):
            parts.append(f"ref={alg['reference']}")
        return f"{self.scenario.kind}/{'/'.join(parts)}"


def checkpoints(T: int, stride: Optional[int]) -> np.ndarray:
    if stride == 0:
        return np.array([T])
    if stride is None:
        pts = [1 << k for k in range(T.bit_length()) if (1 << k) <= T]
        if pts[-1] != T:
            pts.append(T)
        return np.array(pts)
    return np.arange(stride, T + 1, stride)


# -- execution -----------------------------------------------------------------------


def build_engine(config: RunConfig, rng: np.random.Generator):
    alg, loss, K, N = config.algorithm, config.loss_obj, config.K, config.scenario.N
    if alg["engine"] == "calibeat":
        return CalibeatingEngine.from_spec(alg["learner"], loss, K, rng)
    if alg["engine"] == "multi":
        return MultiEngine(N, alg["learner"], loss, K, alg.get("mode"), alg.get("aggregator"), config.T, rng)
    grid = build_grid(K, epsilon_schedule(alg["eps"], max(config.T, 2), K))
    ref = None
    lop = None
    if alg["reference"] == "calibeat":
        ref = CalibeatingEngine.from_spec(alg["learner"], loss, K, rng)
    elif alg["reference"] == "multi":
        ref = MultiEngine(N, alg["learner"], loss, K, "mixture", alg.get("aggregator"), config.T, rng)
    if ref is not None:
        lop = Lopsided.for_horizon(config.T, loss.loss_range)
    return SimulEngine(grid, ref, lop, rng)


@dataclass
class Trace:
    """Per-round arrays of one replicate (kept in memory only)."""

    stream: Stream
    predictions: np.ndarray
    prediction_ids: np.ndarray
    losses: np.ndarray
    expected_losses: np.ndarray
    candidate_losses: Optional[np.ndarray] = None
    pi: Optional[np.ndarray] = None
    grid_points: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


def execute(config: RunConfig, replicate: int = 0, stream: Optional[Stream] = None) -> Trace:
    """Run the engine on one replicate's stream and return per-round arrays."""
    if stream is None:
        stream = generate(config.scenario, config.T, config.seed, replicate)
    loss = config.loss_obj
    rng = stream_generator(config.seed, replicate, ALGORITHM_STREAM)
    engine = build_engine(config, rng)
    y = stream.outcomes
    engine_kind = config.algorithm["engine"]
    if engine_kind == "calibeat":
        preds = engine.run_batch(stream.forecasts[:, 0], y)
        losses = per_round_losses(loss, preds, y)
        return Trace(stream, preds, group_points(preds), losses, losses)
    if engine_kind == "multi":
        out = engine.run_batch(stream.forecasts, y, rng=rng)
        preds = out["predictions"]
        losses = per_round_losses(loss, preds, y)
        return Trace(stream, preds, group_points(preds), losses, out["expected_losses"],
                     candidate_losses=out["candidate_losses"], extras={"weights": out["weights"]})
    out = engine.run_batch(stream.forecasts, y)
    ref_preds = out["reference_predictions"]
    extras = {
        "w": out["w"],
        "residual": out["residual"],
        "bm_losses": out["bm_losses"],
        "ref_losses": out["ref_losses"],
        "ref_true_losses": None if ref_preds is None else per_round_losses(loss, ref_preds, y),
        "epsilon": engine.grid.epsilon,
        "M": engine.grid.M,
    }
    return Trace(stream, out["predictions"], out["index"], out["realized_losses"], out["expected_losses"],
                 pi=out["pi"], grid_points=engine.grid.points, extras=extras)


def best_swap_oracle(spec: Loss, pi: np.ndarray, outcomes: np.ndarray, grid_points: np.ndarray):
    """Best remapping of grid points against pi-weighted outcomes.

    Returns ``(remap, value)``: ``remap[i]`` is the pi-weighted outcome mean
    at grid point ``i`` (the point itself when it never carries mass) and
    ``value`` is ``sum_t E_{i ~ pi_t} loss(remap[i], y_t)``.
    """
    K = grid_points.shape[1]
    mass, W = weighted_grid_counts(pi, np.asarray(outcomes, dtype=np.int64), K)
    remap = np.array(grid_points, dtype=np.float64, copy=True)
    live = mass > 0
    remap[live] = W[live] / mass[live, None]
    value = sum(spec.bin_optimum(W[i])[1] for i in np.flatnonzero(live))
    return remap, float(value)


def remap_value(spec: Loss, pi: np.ndarray, outcomes: np.ndarray, remap: np.ndarray) -> float:
    """``sum_t E_{i ~ pi_t} loss(remap[i], y_t)`` for an arbitrary remapping table."""
    _, W = weighted_grid_counts(pi, np.asarray(outcomes, dtype=np.int64), remap.shape[1])
    return float((W * spec.loss_matrix(remap)).sum())


def _refinements(loss: Loss, ids: np.ndarray, y: np.ndarray, K: int, ts: np.ndarray) -> np.ndarray:
    n_bins = int(ids.max()) + 1
    return np.array([loss.refinement_from_counts(bin_counts(ids[:t], y[:t], K, n_bins)) for t in ts])


def _closed_form(loss: Loss, C: np.ndarray, points: np.ndarray) -> Optional[float]:
    n = C.sum(axis=1)
    keep = n > 0
    C, n, points = C[keep], n[keep], points[keep]
    rho = C / n[:, None]
    if isinstance(loss, Brier):
        return float((n * ((points - rho) ** 2).sum(axis=1)).sum())
    if loss.name == "log":
        from scipy.special import xlogy

        return float((n * (xlogy(rho, rho) - xlogy(rho, points)).sum(axis=1)).sum())
    return None


def metrics(config: RunConfig, trace: Trace) -> list[dict]:
    """Checkpoint metrics; raises :class:`RunAbort` if ``L = R + K`` fails."""
    loss, K = config.loss_obj, config.K
    y = trace.stream.outcomes
    ts = checkpoints(config.T, config.metrics_stride)
    N = trace.stream.forecasts.shape[1]
    Lcum = np.cumsum(trace.losses)
    Lexp = np.cumsum(trace.expected_losses)
    f_ids = [group_points(trace.stream.forecasts[:, n]) for n in range(N)]
    R_f = np.column_stack([_refinements(loss, ids, y, K, ts) for ids in f_ids])
    pid = trace.prediction_ids
    n_pred = int(pid.max()) + 1
    if trace.grid_points is not None:
        pred_points = trace.grid_points
        n_pred = len(pred_points)
    else:
        first = np.unique(pid, return_index=True)[1]
        pred_points = trace.predictions[first]
    cand = None if trace.candidate_losses is None else np.cumsum(trace.candidate_losses, axis=0)
    ex = trace.extras
    rows = []
    for j, t in enumerate(ts):
        C = bin_counts(pid[:t], y[:t], K, n_pred)
        L = float(Lcum[t - 1])
        R_self = loss.refinement_from_counts(C)
        Kc = _closed_form(loss, C, pred_points)
        Kt = L - R_self if Kc is None else Kc
        if abs(L - (R_self + Kt)) > DECOMPOSITION_TOL * max(1.0, abs(L)):
            raise RunAbort(f"decomposition identity violated: L={L!r}, R={R_self!r}, K={Kt!r}", int(t))
        row = {
            "t": int(t),
            "L": L,
            "L_exp": float(Lexp[t - 1]),
            "R_self": R_self,
            "K": Kt,
            "R_f": R_f[j].tolist(),
            "gap": (L - R_f[j]).tolist(),
            "gap_exp": (float(Lexp[t - 1]) - R_f[j]).tolist(),
            "Ktilde": None,
            "agg_regret": None,
            "w_mean": None,
        }
        if cand is not None:
            agg_loss = L if _is_mixture(config) else float(Lexp[t - 1])
            row["agg_regret"] = agg_loss - float(cand[t - 1].min())
            row["sub_gap"] = (cand[t - 1] - R_f[j]).tolist()
        if trace.pi is not None:
            pi = trace.pi[:t]
            mass, W = weighted_grid_counts(pi, y[:t], K)
            live = mass > 0
            rho = W[live] / mass[live, None]
            row["Ktilde"] = float((mass[live] * ((trace.grid_points[live] - rho) ** 2).sum(axis=1)).sum())
            row["w_mean"] = float(ex["w"][:t].mean())
            row["residual_max"] = float(ex["residual"][:t].max())
            _, best = best_swap_oracle(loss, pi, y[:t], trace.grid_points)
            row["swap_regret"] = float(ex["bm_losses"][:t].sum()) - best
            if ex["ref_true_losses"] is not None:
                row["ref_L"] = float(ex["ref_true_losses"][:t].sum())
                row["ref_rounded_L"] = float(ex["ref_losses"][:t].sum())
        rows.append(row)
    return rows


def _is_mixture(config: RunConfig) -> bool:
    mode = config.algorithm.get("mode")
    if mode is None:
        return not hasattr(config.loss_obj, "table")
    return mode == "mixture"


@dataclass
class RunResult:
    config: RunConfig
    replicates: list[list[dict]]
    mean: list[dict]
    wall_clock: float = 0.0
    traces: Optional[list[Trace]] = None

    @property
    def final(self) -> dict:
        return self.mean[-1]

    def replicate_document(self, r: int) -> dict:
        return {
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "setting": self.config.setting(),
            "seed": int(self.config.seed),
            "replicate": r,
            "checkpoints": self.replicates[r],
            "mean": self.mean,
        }

    def file_stem(self, r: int) -> str:
        return f"{self.config.config_hash()}_{self.config.seed}_{r}"


def _mean_rows(reps: list[list[dict]]) -> list[dict]:
    out = []
    for rows in zip(*reps):
        m = {}
        for key, val in rows[0].items():
            vals = [r[key] for r in rows]
            if key == "t" or val is None:
                m[key] = val
            elif isinstance(val, list):
                m[key] = np.mean(np.array(vals, dtype=np.float64), axis=0).tolist()
            else:
                m[key] = float(np.mean(vals))
        out.append(m)
    return out


def run(config: RunConfig, threads: int = 1, keep_traces: bool = False) -> RunResult:
    """Execute every replicate and compute checkpoint metrics."""
    start = time.perf_counter()

    def one(r):
        trace = execute(config, r)
        return metrics(config, trace), (trace if keep_traces else None)

    reps = range(config.replicates)
    if threads > 1 and config.replicates > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(one, reps))
    else:
        done = [one(r) for r in reps]
    rows = [d[0] for d in done]
    traces = [d[1] for d in done] if keep_traces else None
    return RunResult(config, rows, _mean_rows(rows), time.perf_counter() - start, traces)


# -- serialization --------------------------------------------------------------------


def csv_text(rows: list[dict], N: int) -> str:
    header = ["t", "L", "R_self"] + [f"R_f{n + 1}" for n in range(N)] + ["K", "Ktilde"]
    header += [f"gap_{n + 1}" for n in range(N)] + ["agg_regret", "w_mean", "L_exp"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)

    def fmt(v):
        return "" if v is None else repr(float(v)) if not isinstance(v, int) else str(v)

    for r in rows:
        w.writerow([r["t"], fmt(r["L"]), fmt(r["R_self"])] + [fmt(v) for v in r["R_f"]]
                   + [fmt(r["K"]), fmt(r["Ktilde"])] + [fmt(v) for v in r["gap"]]
                   + [fmt(r["agg_regret"]), fmt(r["w_mean"]), fmt(r["L_exp"])])
    return buf.getvalue()


def write_result(result: RunResult, out_dir) -> list[str]:
    """Write ``{hash}_{seed}_{replicate}.json`` and ``.csv`` per replicate; returns the paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    N = result.config.scenario.N
    for r in range(len(result.replicates)):
        stem = os.path.join(out_dir, result.file_stem(r))
        with open(stem + ".json", "w") as fp:
            json.dump(result.replicate_document(r), fp, sort_keys=True, indent=1)
            fp.write("\n")
        with open(stem + ".csv", "w") as fp:
            fp.write(csv_text(result.replicates[r], N))
        paths += [stem + ".json", stem + ".csv"]
    return paths


# -- rate fitting ----------------------------------------------------------------------

RATE_SHAPES = ("log", "sqrt", "sqrt_log")


@dataclass
class RateFit:
    shape: str
    coefficients: tuple
    max_rel_residual: float

    def __call__(self, t):
        c1, c2 = self.coefficients
        t = np.asarray(t, dtype=np.float64)
        return c1 + c2 * _regressor(self.shape, t)


def _regressor(shape: str, t: np.ndarray) -> np.ndarray:
    if shape == "log":
        return np.log(t)
    if shape == "sqrt":
        return np.sqrt(t)
    if shape == "sqrt_log":
        return np.sqrt(t * np.log(t))
    raise ValueError(f"unknown rate shape {shape!r} (expected one of {RATE_SHAPES})")


def rate_fit(ts, values, shape: str) -> RateFit:
    """Least squares in the transformed regressor.

    ``log``: ``C1 + C2 ln t``; ``sqrt``: ``C2 sqrt(t)`` (no intercept);
    ``sqrt_log``: ``C1 + C2 sqrt(t ln t)``.  Needs at least 4 points
    spanning at least two decades of ``t``.
    """
    t = np.asarray(ts, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if t.size != v.size:
        raise ValueError("ts and values differ in length")
    if t.size < 4 or np.any(t <= 0) or t.max() / t.min() < 100:
        raise ValueError("degenerate span: need >= 4 checkpoints covering >= 2 decades")
    x = _regressor(shape, t)
    if shape == "sqrt":
        c2 = float(x @ v / (x @ x))
        coef = (0.0, c2)
    else:
        X = np.column_stack([np.ones_like(x), x])
        sol = np.linalg.lstsq(X, v, rcond=None)[0]
        coef = (float(sol[0]), float(sol[1]))
    fit = coef[0] + coef[1] * x
    scale = np.maximum(np.abs(v), 1e-12)
    return RateFit(shape, coef, float(np.max(np.abs(fit - v) / scale)))


def fit_series(rows: list[dict], key: str = "gap", shape: str = "log") -> Optional[RateFit]:
    """Fit ``max_n gap`` (or any scalar column) across checkpoints; None when the span is too short."""
    ts = [r["t"] for r in rows]
    vals = [max(r[key]) if isinstance(r[key], list) else r[key] for r in rows]
    try:
        return rate_fit(ts, vals, shape)
    except ValueError:
        return None
