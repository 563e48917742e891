"""Invariant and rate checks, grouped into suites.

Each ``measure_*`` function runs an experiment on the given seeds and
returns raw measurements; each ``check_*`` function compares measurements
on the acceptance seeds against the constants in :data:`CONSTANTS`.  The
constants were frozen from ``demos/pilot_constants.py``, which calls the same
``measure_*`` functions on a disjoint block of seeds.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import xlogy

from .grid import build_grid, grid_from_denominator, round_many
from .harness import (
    AdversarialFlip, IidBinned, LowerBoundStyle, MultiForecaster, RunConfig, run, write_result,
)
from .learners import Hedge, Lopsided
from .scoring import Transcript, calibration_closed_form, cumulative_loss, refinement
from .simplex import Brier, LogLoss
from .simulcal import stationary

ACCEPTANCE_SEEDS = range(20)
PILOT_SEED_OFFSET = 1000

# frozen from the pilot (seeds 1000..1019): measured value x 1.5, rounded up to two digits
CONSTANTS = {
    "C_FTL": 0.84,
    "c_multi": 0.52,
    "c1_lopsided": 1.2,
    "c2_lopsided": 3.2,
    "C_bm": 0.14,
    "c_sim_gap": 1.1,
    "c_sim_cal": 0.17,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} ({self.seconds:.1f}s)"

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "seconds": round(self.seconds, 3),
                "details": _plain(self.details)}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _timed(name: str, fn: Callable[[], tuple[bool, dict]]) -> CheckResult:
    start = time.perf_counter()
    try:
        ok, details = fn()
    except Exception as exc:  # a crash is a failed check, reported by name
        ok, details = False, {"error": f"{type(exc).__name__}: {exc}"}
    return CheckResult(name, bool(ok), details, time.perf_counter() - start)


# -- 1. decomposition identity ---------------------------------------------------------


def random_transcript(rng, K: int, T: int, n_points: int = 20, interior: bool = True) -> Transcript:
    pts = rng.dirichlet(np.ones(K), size=n_points)
    if not interior:
        pts[: n_points // 4] = np.eye(K)[rng.integers(0, K, n_points // 4)]
    preds = pts[rng.integers(0, n_points, T)]
    y = rng.integers(0, K, T)
    q = pts[rng.integers(0, n_points, T)]
    return Transcript(q[:, None, :], preds, y)


def measure_decomposition(seeds=range(100), T: int = 10_000) -> dict:
    worst = {}
    for loss in (Brier(), LogLoss()):
        errs = []
        for s in seeds:
            rng = np.random.default_rng([s, 1])
            tr = random_transcript(rng, 2 + s % 2, T)
            L = cumulative_loss(loss, tr)
            R = refinement(loss, tr.predictions, tr.outcomes)
            Kc = calibration_closed_form(loss, tr)
            errs.append(abs(L - (R + Kc)) / max(1.0, L))
        worst[loss.name] = max(errs)
    return worst


def check_decomposition(seeds=range(100)) -> CheckResult:
    def body():
        worst = measure_decomposition(seeds)
        return all(v <= 1e-9 for v in worst.values()), {"max_rel_err": worst, "tol": 1e-9}

    return _timed("decomposition identity", body)


# -- 2. closed-form refinement vs brute force -----------------------------------------


def simplex_lattice(K: int, step: float) -> np.ndarray:
    m = round(1 / step)
    return grid_from_denominator(K, m).points


def brute_force_bin_value(loss_name: str, counts: np.ndarray, lattice: np.ndarray) -> float:
    if loss_name == "brier":
        n = counts.sum()
        vals = n * (lattice**2).sum(axis=1) - 2 * lattice @ counts + n
    else:
        with np.errstate(divide="ignore"):
            vals = -xlogy(counts[None, :], lattice).sum(axis=1)
    return float(vals.min())


def measure_bin_optimum(seeds=range(50), step: float = 0.001) -> dict:
    # bin sizes divide 1000 so the exact minimizer lies on the 0.001 lattice
    sizes = np.array([1, 2, 4, 5, 8, 10, 20, 25, 40, 50])
    lattices = {K: simplex_lattice(K, step) for K in (2, 3)}
    worst = {"brier": 0.0, "log": 0.0}
    for s in seeds:
        rng = np.random.default_rng([s, 2])
        K = 2 + s % 2
        n = int(rng.choice(sizes))
        counts = np.bincount(rng.integers(0, K, n), minlength=K).astype(np.float64)
        for loss in (Brier(), LogLoss()):
            closed = loss.bin_optimum(counts)[1]
            brute = brute_force_bin_value(loss.name, counts, lattices[K])
            worst[loss.name] = max(worst[loss.name], abs(closed - brute))
    return worst


def check_bin_optimum(seeds=range(50)) -> CheckResult:
    def body():
        worst = measure_bin_optimum(seeds)
        return all(v <= 1e-5 for v in worst.values()), {"max_abs_err": worst, "tol": 1e-5}

    return _timed("closed-form refinement vs brute force", body)


# -- 3. rounding ---------------------------------------------------------------------------


def measure_rounding(seed: int = 0, n: int = 1000) -> dict:
    out = {}
    for K in (2, 3):
        for m in (2, 10, 50):
            grid = grid_from_denominator(K, m)
            rng = np.random.default_rng([seed, K, m])
            Q = rng.dirichlet(np.ones(K), size=n)
            idx, w = round_many(grid, Q)
            V = grid.points[idx]  # (n, K, K)
            mean = np.einsum("nj,njk->nk", w, V)
            sq = np.einsum("nj,nj->n", w, ((V - Q[:, None, :]) ** 2).sum(axis=2))
            out[f"K={K},m={m}"] = {
                "mean_err": float(np.abs(mean - Q).max()),
                "max_sq_err_times_m2": float(sq.max() * m * m),
                "weights_sum_err": float(np.abs(w.sum(axis=1) - 1).max()),
                "support_max": int((w > 0).sum(axis=1).max()),
            }
    return out


def check_rounding(seed: int = 0) -> CheckResult:
    def body():
        res = measure_rounding(seed)
        ok = all(r["mean_err"] <= 1e-12 and r["max_sq_err_times_m2"] <= 2.0 and r["weights_sum_err"] <= 1e-12
                 for r in res.values())
        return ok, res

    return _timed("rounding unbiasedness and spread", body)


# -- 4/5. calibeating log rate -------------------------------------------------------------


def measure_calibeating(learner: str, loss: str, seeds, Qs=(1, 5, 10, 25), T: int = 2**17) -> dict:
    """Mean (over seeds) gap at every power-of-two checkpoint, per |Q|."""
    out = {}
    for Q in Qs:
        gaps = []
        for s in seeds:
            cfg = RunConfig(IidBinned.spread(Q), T, int(s), f"engine=calibeat;learner={learner}", loss)
            rows = run(cfg).replicates[0]
            gaps.append([r["gap"][0] for r in rows])
        ts = [r["t"] for r in rows]
        out[Q] = {"t": ts, "mean_gap": np.mean(gaps, axis=0).tolist(), "max_gap": np.max(gaps, axis=0).tolist()}
    return out


def _log_rate_ok(meas: dict, bound: Callable[[int, int], float], t_lo=2**10, ratio_pair=(2**12, 2**17)):
    details, ok = {}, True
    for Q, m in meas.items():
        ts, g = np.array(m["t"]), np.array(m["mean_gap"])
        sel = ts >= max(t_lo, 4 * Q)
        worst = max(g[sel] / np.array([bound(Q, t) for t in ts[sel]]))
        d = {"worst_gap_over_bound": float(worst)}
        if ratio_pair is not None:
            a, b = ratio_pair
            na = g[ts == a][0] / (Q * math.log(a / Q))
            nb = g[ts == b][0] / (Q * math.log(b / Q))
            d["normalized_ratio"] = float(nb / na)
            ok &= nb <= 1.1 * na
        ok &= worst <= 1.0
        details[Q] = d
    return bool(ok), details


def check_calibeating_ftl(seeds=ACCEPTANCE_SEEDS, T: int = 2**17) -> CheckResult:
    C = CONSTANTS["C_FTL"]

    def body():
        meas = measure_calibeating("ftl_brier", "brier", seeds, T=T)
        ok, det = _log_rate_ok(meas, lambda Q, t: C * Q * (1 + math.log(t / Q)))
        return ok, {"C_FTL": C, "per_Q": det}

    return _timed("calibeating log rate (FTL, Brier)", body)


def check_calibeating_kt(seeds=ACCEPTANCE_SEEDS, T: int = 2**17) -> CheckResult:
    K = 2

    def body():
        meas = measure_calibeating("kt", "log", seeds, T=T)
        ok, det = _log_rate_ok(meas, lambda Q, t: 1.5 * (K / 2) * Q * math.log(t / Q) + K * Q, ratio_pair=None)
        return ok, {"per_Q": det}

    return _timed("calibeating log rate (KT, log loss)", body)


# -- 6/7. multi-calibeating -----------------------------------------------------------------


def composition_slack(rows: list[dict]) -> float:
    """Largest ``gap_n - (sub_gap_n + agg_regret)`` over checkpoints and forecasters."""
    worst = -math.inf
    for r in rows:
        for g, sg in zip(r["gap_exp"], r["sub_gap"]):
            worst = max(worst, g - (sg + r["agg_regret"]))
    return worst


def measure_multi(seeds, N: int = 8, Q: int = 8, T: int = 2**16, algorithm: str = "engine=multi",
                  loss="brier") -> dict:
    finals, slack = [], -math.inf
    for s in seeds:
        cfg = RunConfig(MultiForecaster(N, Q), T, int(s), algorithm, loss)
        rows = run(cfg).replicates[0]
        slack = max(slack, composition_slack(rows))
        f = rows[-1]
        finals.append({"max_gap": max(f["gap_exp"]), "agg_regret": f["agg_regret"]})
    return {"finals": finals, "composition_slack": slack}


def check_multi_rate(seeds=range(10), T: int = 2**16) -> CheckResult:
    c, N, Q = CONSTANTS["c_multi"], 8, 8

    def body():
        meas = measure_multi(seeds, N, Q, T)
        bound = c * (math.log(N) + Q * math.log(T))
        gmax = max(f["max_gap"] for f in meas["finals"])
        rmax = max(f["agg_regret"] for f in meas["finals"])
        ok = gmax <= bound and rmax <= 4 * math.log(N) and meas["composition_slack"] <= 1e-9
        return ok, {"max_gap": gmax, "gap_bound": bound, "c": c, "max_agg_regret": rmax,
                    "regret_bound": 4 * math.log(N), "composition_slack": meas["composition_slack"]}

    return _timed("multi-calibeating log rate", body)


def check_composition(seeds=range(3)) -> CheckResult:
    def body():
        runs = {
            "mixture_brier": measure_multi(seeds, 4, 4, 2**12),
            "mixture_log": measure_multi(seeds, 4, 4, 2**12, "engine=multi;learner=kt", "log"),
            "sampling_brier": measure_multi(seeds, 4, 4, 2**12, "engine=multi;mode=sampling;aggregator=hedge"),
        }
        slack = {k: v["composition_slack"] for k, v in runs.items()}
        return all(v <= 1e-9 for v in slack.values()), {"composition_slack": slack}

    return _timed("multi-calibeating composition", body)


# -- 8. Hedge --------------------------------------------------------------------------------


def alternating_losses(T: int) -> np.ndarray:
    a = (np.arange(T) % 2).astype(np.float64)
    return np.column_stack([a, 1 - a])


def measure_hedge(seeds, T: int = 10_000) -> dict:
    losses = alternating_losses(T)
    h = Hedge(2, 1.0, horizon=T)
    P = h.replay_probabilities(losses)
    best = losses.sum(axis=0).min()
    regrets = []
    for s in seeds:
        u = np.random.default_rng([s, 8]).random(T)
        idx = np.minimum((np.cumsum(P, axis=1) < u[:, None]).sum(axis=1), 1)
        regrets.append(losses[np.arange(T), idx].sum() - best)
    regrets = np.array(regrets)
    return {"mean": float(regrets.mean()), "sigma": float(regrets.std(ddof=1) / math.sqrt(len(regrets))),
            "expected": float((P * losses).sum() - best)}


def check_hedge(seeds=range(50), T: int = 10_000) -> CheckResult:
    def body():
        m = measure_hedge(seeds, T)
        bound = math.sqrt(T / 2 * math.log(2)) * 1.0
        return m["mean"] <= bound + 3 * m["sigma"], {**m, "bound": bound}

    return _timed("Hedge regret bound", body)


# -- 9. lopsided ------------------------------------------------------------------------------

LOPSIDED_STREAMS = ("expert1_wins", "expert2_wins", "alternating", "random", "switch")


def lopsided_stream(kind: str, T: int, seed: int = 0) -> np.ndarray:
    """``(T, 2)`` losses in ``[0, 2]`` for the two experts."""
    t = np.arange(T)
    if kind == "expert1_wins":
        return np.column_stack([np.zeros(T), np.full(T, 2.0)])
    if kind == "expert2_wins":
        return np.column_stack([np.full(T, 2.0), np.zeros(T)])
    if kind == "alternating":
        a = 2.0 * (t % 2)
        return np.column_stack([a, 2.0 - a])
    if kind == "random":
        return 2.0 * np.random.default_rng([seed, 9]).random((T, 2))
    if kind == "switch":
        first = t < T // 2
        return np.column_stack([np.where(first, 0.0, 2.0), np.where(first, 1.0, 0.5)])
    raise ValueError(kind)


def lopsided_regrets(losses: np.ndarray) -> tuple[float, float]:
    T = len(losses)
    lop = Lopsided.for_horizon(T, 2.0)
    total = 0.0
    for g1, g2 in losses:
        w = lop.weight()
        total += w * g1 + (1 - w) * g2
        lop.update(g1, g2)
    cum = losses.sum(axis=0)
    return total - cum[0], total - cum[1]


def measure_lopsided(seed: int = 0, Ts=(1_000, 10_000, 100_000)) -> dict:
    out = {}
    for kind in LOPSIDED_STREAMS:
        for T in Ts:
            r1, r2 = lopsided_regrets(lopsided_stream(kind, T, seed))
            out[f"{kind}/T={T}"] = {"T": T, "regret1": r1, "regret2": r2}
    return out


def check_lopsided(seed: int = 0) -> CheckResult:
    c1, c2 = CONSTANTS["c1_lopsided"], CONSTANTS["c2_lopsided"]

    def body():
        m = measure_lopsided(seed)
        worst2 = max(v["regret2"] for v in m.values())
        worst1 = max(v["regret1"] / math.sqrt(v["T"] * math.log(v["T"])) for v in m.values())
        return worst2 <= c2 and worst1 <= c1, {"max_regret2": worst2, "c2": c2,
                                               "max_regret1_over_sqrtTlogT": worst1, "c1": c1}

    return _timed("lopsided two-expert regret", body)


# -- 10. BM swap regret ------------------------------------------------------------------------


BM_SCENARIOS = {
    "flip_1": AdversarialFlip(1),
    "flip_37": AdversarialFlip(37),
    "coin": LowerBoundStyle(1),
    "iid_3": IidBinned.spread(3),
}


def measure_bm(seeds, T: int = 5000, m: int = 2) -> dict:
    out = {}
    for name, scen in BM_SCENARIOS.items():
        vals = []
        for s in seeds:
            cfg = RunConfig(scen, T, int(s), f"engine=simul;reference=none;eps={1.0 / m}", "brier", metrics_stride=0)
            vals.append(run(cfg).final["swap_regret"])
        out[name] = max(vals)
    return out


def check_bm(seeds=range(5), T: int = 5000) -> CheckResult:
    C, m, K = CONSTANTS["C_bm"], 2, 2

    def body():
        M = grid_from_denominator(K, m).M
        bound = C * (M * math.log(T) + T / m**2)
        meas = measure_bm(seeds, T, m)
        return max(meas.values()) <= bound, {"max_swap_regret": meas, "bound": bound, "C": C}

    return _timed("BM swap regret", body)


# -- 11/12. simultaneous guarantee ----------------------------------------------------------------


def measure_simul(seeds, Ts=(2**12, 2**14, 2**16), Q: int = 2) -> dict:
    out = {}
    for T in Ts:
        rows = []
        for s in seeds:
            cfg = RunConfig(IidBinned.spread(Q), T, int(s), "engine=simul;eps=binary;reference=calibeat",
                            "brier", metrics_stride=0)
            f = run(cfg).final
            rows.append({"gap": f["gap_exp"][0], "K": f["K"], "residual_max": f["residual_max"]})
        out[T] = rows
    return out


def pseudo_bound_rhs(K: int, M: int, delta: float) -> float:
    return 96 * K * M * math.log(4 * K * M / delta)


def measure_pseudo_bound(seeds, T: int = 10_000, delta: float = 0.05) -> dict:
    K, M = 2, 3
    viol, ratios = 0, []
    for s in seeds:
        cfg = RunConfig(IidBinned.spread(2), T, int(s), "engine=simul;eps=0.5;reference=calibeat",
                        "brier", metrics_stride=0)
        f = run(cfg).final
        rhs = 6 * f["Ktilde"] + pseudo_bound_rhs(K, M, delta)
        viol += f["K"] > rhs
        ratios.append(f["K"] / rhs)
    return {"violations": int(viol), "runs": len(seeds), "max_K_over_rhs": float(max(ratios))}


def check_simul(seeds=range(10), Ts=(2**12, 2**14, 2**16), bound_seeds=range(100)) -> CheckResult:
    c, cp, Q = CONSTANTS["c_sim_gap"], CONSTANTS["c_sim_cal"], 2

    def body():
        meas = measure_simul(seeds, Ts, Q)
        det, ok = {}, True
        for T, rows in meas.items():
            g = max(r["gap"] for r in rows) / (Q * math.log(T))
            k = max(r["K"] for r in rows) / math.sqrt(T * math.log(T))
            res = max(r["residual_max"] for r in rows)
            det[T] = {"gap_over_QlogT": g, "K_over_sqrtTlogT": k, "residual_max": res}
            ok &= g <= c and k <= cp and res <= 1e-10
        lem = measure_pseudo_bound(bound_seeds)
        ok &= lem["violations"] <= 10
        return ok, {"c": c, "c_prime": cp, "per_T": det, "pseudo_bound": lem}

    return _timed("simultaneous calibeating and calibration", body)


def measure_tradeoff(seed: int = 0, T: int = 2**14, K: int = 3, Q: int = 3) -> dict:
    cfg = RunConfig(IidBinned.spread(Q, K), T, seed, "engine=simul;eps=multiclass;reference=calibeat",
                    "brier", metrics_stride=0)
    f = run(cfg).final
    return {"K_over_T": f["K"] / T, "gap_over_T": f["gap_exp"][0] / T, "residual_max": f["residual_max"]}


def check_tradeoff(seed: int = 0) -> CheckResult:
    def body():
        m = measure_tradeoff(seed)
        return m["K_over_T"] <= 0.2 and m["gap_over_T"] <= 0.2, m

    return _timed("K=3 tradeoff smoke test", body)


# -- 13. determinism and small invariants ---------------------------------------------------------


def check_determinism() -> CheckResult:
    def body():
        cfgs = [
            RunConfig(IidBinned.spread(3), 2000, 11, "engine=calibeat", "brier", replicates=2),
            RunConfig(MultiForecaster(3, 4), 2000, 11, "engine=multi;mode=sampling;aggregator=hedge", "brier"),
            RunConfig(IidBinned.spread(2), 1000, 11, "engine=simul;eps=binary", "brier"),
        ]
        same = []
        for cfg in cfgs:
            blobs = []
            for _ in range(2):
                with tempfile.TemporaryDirectory() as d:
                    paths = write_result(run(cfg), d)
                    blobs.append({os.path.basename(p): open(p, "rb").read() for p in paths})
            same.append(blobs[0] == blobs[1])
        return all(same), {"identical": same}

    return _timed("determinism", body)


def check_properness(step: float = 0.05) -> CheckResult:
    def body():
        P = simplex_lattice(3, step)
        interior = P[(P > 0).all(axis=1)]
        bad = {}
        for loss, pts in ((Brier(), P), (LogLoss(), interior)):
            E = pts @ loss.loss_matrix(pts).T  # E[i, j] = expected loss of prediction j under q_i
            best = E.min(axis=1)
            bad[loss.name] = int((E[np.arange(len(pts)), np.arange(len(pts))] > best + 1e-12).sum())
        return all(v == 0 for v in bad.values()), {"non_minimizing": bad}

    return _timed("properness on a test grid", body)


def check_stationary_examples() -> CheckResult:
    def body():
        b = np.array([0.2, 0.3, 0.5])
        got = {
            "rank_one": stationary(np.tile(b[:, None], (1, 3))),
            "swap": stationary(np.array([[0.0, 1.0], [1.0, 0.0]])),
            "identity": stationary(np.eye(4)),
        }
        want = {"rank_one": b, "swap": np.full(2, 0.5), "identity": np.full(4, 0.25)}
        errs = {k: float(np.abs(got[k] - want[k]).max()) for k in got}
        return all(e <= 1e-9 for e in errs.values()), {"max_err": errs}

    return _timed("stationary distribution examples", body)


SUITES = {
    "core": [check_properness, check_decomposition, check_bin_optimum, check_rounding,
             check_stationary_examples, check_composition, check_determinism],
    "rates": [check_calibeating_ftl, check_calibeating_kt, check_multi_rate, check_hedge, check_lopsided],
    "simulcal": [check_rounding, check_stationary_examples, check_bm, check_simul, check_tradeoff],
}
SUITES["all"] = list(dict.fromkeys(SUITES["core"] + SUITES["rates"] + SUITES["simulcal"]))


def run_suite(name: str, report: Callable[[CheckResult], None] = lambda r: None) -> list[CheckResult]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r} (expected one of {', '.join(SUITES)})")
    results = []
    for fn in SUITES[name]:
        res = fn()
        report(res)
        results.append(res)
    return results
