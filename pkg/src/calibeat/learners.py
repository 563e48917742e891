"""No-regret learners over the simplex and expert aggregators.

Per-bin learners (used by the calibeating engine) share a tiny protocol::

    p = learner.predict()
    learner.update(y)            # or update(y, weight) for weighted FTL

and ``learner.replay(outcomes)`` which processes a whole outcome sequence
and returns the prediction issued before each outcome.  ``replay`` is
exactly equivalent to alternating predict/update; FTL variants and EWOO
vectorize it.

Aggregators take expert losses; :class:`Lopsided` is the two-expert
algorithm with O(1) regret to its second expert.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .grid import grid_from_denominator
from .simplex import Brier, GridProper, Loss, LogLoss, uniform


class Learner:
    kind = "learner"

    def predict(self) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def update(self, y: int) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    def replay(self, outcomes) -> np.ndarray:
        outcomes = np.asarray(outcomes, dtype=np.int64)
        out = np.empty((outcomes.size, self.K))
        for t, y in enumerate(outcomes):
            out[t] = self.predict()
            self.update(int(y))
        return out

    @property
    def n_updates(self) -> int:
        return self.t


class FTLBrier(Learner):
    """Follow-the-leader for the Brier loss: the (weighted) empirical mean."""

    kind = "ftl_brier"

    def __init__(self, K: int):
        self.K = K
        self.counts = np.zeros(K)
        self.t = 0
        self.mass = 0.0

    def predict(self):
        if self.mass <= 0:
            return uniform(self.K)
        return self.counts / self.mass

    def update(self, y, weight: float = 1.0):
        self.counts[y] += weight
        self.mass += weight
        self.t += 1

    def replay(self, outcomes):
        outcomes = np.asarray(outcomes, dtype=np.int64)
        n = outcomes.size
        onehot = np.zeros((n, self.K))
        onehot[np.arange(n), outcomes] = 1.0
        before = self.counts + np.vstack([np.zeros(self.K), np.cumsum(onehot, axis=0)[:-1]])
        mass = self.mass + np.arange(n, dtype=np.float64)
        preds = np.empty((n, self.K))
        live = mass > 0
        preds[live] = before[live] / mass[live, None]
        preds[~live] = 1.0 / self.K
        self.counts = self.counts + onehot.sum(axis=0)
        self.mass += n
        self.t += n
        return preds

    def state_dict(self):
        return {"kind": self.kind, "counts": self.counts.tolist(), "t": self.t, "mass": self.mass}


class FTLLogKT(Learner):
    """Krichevsky-Trofimov smoothed leader: ``(counts + 1/2) / (t + K/2)``."""

    kind = "ftl_log"

    def __init__(self, K: int):
        self.K = K
        self.counts = np.zeros(K)
        self.t = 0

    def predict(self):
        return (self.counts + 0.5) / (self.t + self.K / 2)

    def update(self, y):
        self.counts[y] += 1
        self.t += 1

    def replay(self, outcomes):
        outcomes = np.asarray(outcomes, dtype=np.int64)
        n = outcomes.size
        onehot = np.zeros((n, self.K))
        onehot[np.arange(n), outcomes] = 1.0
        before = self.counts + np.vstack([np.zeros(self.K), np.cumsum(onehot, axis=0)[:-1]])
        preds = (before + 0.5) / (self.t + np.arange(n) + self.K / 2)[:, None]
        self.counts = self.counts + onehot.sum(axis=0)
        self.t += n
        return preds

    def state_dict(self):
        return {"kind": self.kind, "counts": self.counts.tolist(), "t": self.t}


class EWOO(Learner):
    """Exponentially weighted online optimization by quadrature on a simplex grid.

    Predicts the exp(-eta * cumulative loss) weighted barycenter of the
    grid.  For the log loss only strictly interior grid points are used.
    """

    kind = "ewoo"

    def __init__(self, K: int, loss: Loss, eta: Optional[float] = None, res: Optional[int] = None,
                 points: Optional[np.ndarray] = None):
        self.K = K
        self.eta = default_eta(loss) if eta is None else float(eta)
        if points is None:
            res = default_resolution(K) if res is None else int(res)
            pts = grid_from_denominator(K, res).points
            if isinstance(loss, LogLoss):
                pts = pts[np.all(pts > 0, axis=1)]
            points = pts
        self.res = res
        self.points = np.asarray(points, dtype=np.float64)
        self.table = loss.loss_matrix(self.points)
        self.cum = np.zeros(len(self.points))
        self.t = 0

    def _weights(self, cum):
        z = -self.eta * (cum - cum.min(axis=-1, keepdims=True))
        w = np.exp(z)
        return w / w.sum(axis=-1, keepdims=True)

    def predict(self):
        return self._weights(self.cum) @ self.points

    def update(self, y):
        self.cum = self.cum + self.table[:, y]
        self.t += 1

    def replay(self, outcomes, chunk: int = 2048):
        outcomes = np.asarray(outcomes, dtype=np.int64)
        out = np.empty((outcomes.size, self.K))
        for s in range(0, outcomes.size, chunk):
            ys = outcomes[s : s + chunk]
            steps = self.table[:, ys].T  # (n, G)
            cum = self.cum + np.vstack([np.zeros(len(self.cum)), np.cumsum(steps, axis=0)[:-1]])
            out[s : s + len(ys)] = self._weights(cum) @ self.points
            self.cum = self.cum + steps.sum(axis=0)
        self.t += outcomes.size
        return out

    def state_dict(self):
        return {"kind": self.kind, "eta": self.eta, "res": self.res, "cum": self.cum.tolist(), "t": self.t}


class SimplePerturbedLeader(Learner):
    """Perturbed leader over the predictions of a :class:`GridProper` table.

    Each prediction draws fresh i.i.d. exponential noise with scale
    ``scale * sqrt(t + 1)``, adds it to the outcome counts and plays the
    grid prediction with the smallest perturbed cumulative loss.  This is a
    simplified stand-in for the perturbed leader of Luo et al.
    """

    kind = "spl"

    def __init__(self, K: int, loss: GridProper, scale: float = 1.0, rng=None):
        if not isinstance(loss, GridProper):
            raise TypeError("the perturbed leader needs a GridProper loss")
        self.K = K
        self.loss = loss
        self.scale = float(scale)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.counts = np.zeros(K)
        self.t = 0

    def choose(self) -> int:
        noise = self.rng.exponential(self.scale * math.sqrt(self.t + 1), size=self.K) if self.scale > 0 else 0.0
        return int(np.argmin(self.loss.table @ (self.counts + noise)))

    def predict(self):
        return self.loss.points[self.choose()].copy()

    def update(self, y):
        self.counts[y] += 1
        self.t += 1

    def state_dict(self):
        return {"kind": self.kind, "scale": self.scale, "counts": self.counts.tolist(), "t": self.t}


def default_eta(loss: Loss) -> float:
    """Exp-concavity constant: 1 for log loss, 1/4 for Brier on the simplex."""
    if isinstance(loss, LogLoss):
        return 1.0
    if isinstance(loss, Brier):
        return 0.25
    raise ValueError(f"no exp-concavity constant for {loss!r}")


def default_resolution(K: int) -> int:
    return 100 if K == 2 else 30


# -- aggregators ------------------------------------------------------------


class ExpWeights:
    """Exponential weights with weighted-mean prediction (exp-concave losses)."""

    def __init__(self, N: int, eta: float = 0.25):
        self.N = N
        self.eta = float(eta)
        self.cum = np.zeros(N)

    def weights(self) -> np.ndarray:
        return _softmin(self.cum, self.eta)

    def predict(self, expert_preds) -> np.ndarray:
        return self.weights() @ np.asarray(expert_preds, dtype=np.float64)

    def update(self, losses) -> None:
        losses = np.asarray(losses, dtype=np.float64)
        if not np.all(np.isfinite(losses)):
            raise ValueError("expert losses must be finite")
        self.cum = self.cum + losses

    def replay_weights(self, losses: np.ndarray) -> np.ndarray:
        """Weights before each round for a ``(T, N)`` loss matrix; advances the state."""
        losses = np.asarray(losses, dtype=np.float64)
        cum = self.cum + np.vstack([np.zeros(self.N), np.cumsum(losses, axis=0)[:-1]])
        self.cum = self.cum + losses.sum(axis=0)
        return _softmin(cum, self.eta)

    def state_dict(self):
        return {"kind": "expweights", "eta": self.eta, "cum": self.cum.tolist()}


class Hedge:
    """Hedge: sample an expert with probability proportional to exp(-eta * cum loss).

    With a known ``horizon`` the rate is ``sqrt(8 ln N / (T D^2))``.  Without
    one (``anytime``) the doubling trick restarts the weights at the end of
    epochs of length 1, 2, 4, ...
    """

    def __init__(self, N: int, loss_range: float = 1.0, horizon: Optional[int] = None,
                 eta: Optional[float] = None):
        self.N = N
        self.D = float(loss_range)
        self.horizon = horizon
        self.fixed_eta = eta
        self.cum = np.zeros(N)
        self.t = 0
        self._epoch_end = 1
        self._epoch_len = 1
        if horizon is None and eta is None:
            self.eta = self._rate(1)
        else:
            self.eta = eta if eta is not None else self._rate(horizon)

    def _rate(self, T: int) -> float:
        if self.N == 1:
            return 0.0
        return math.sqrt(8 * math.log(self.N) / (T * self.D**2))

    def probabilities(self) -> np.ndarray:
        return _softmin(self.cum, self.eta)

    def sample(self, rng) -> int:
        # inverse CDF of one uniform, so batch replays draw the same indices
        u = rng.random()
        if self.N == 1:
            return 0
        return int(min((np.cumsum(self.probabilities()) < u).sum(), self.N - 1))

    def update(self, losses) -> None:
        losses = np.asarray(losses, dtype=np.float64)
        if not np.all(np.isfinite(losses)):
            raise ValueError("expert losses must be finite")
        self.cum = self.cum + losses
        self.t += 1
        if self.horizon is None and self.fixed_eta is None and self.t == self._epoch_end:
            self._epoch_len *= 2
            self._epoch_end += self._epoch_len
            self.cum = np.zeros(self.N)
            self.eta = self._rate(self._epoch_len)

    def replay_probabilities(self, losses: np.ndarray) -> np.ndarray:
        losses = np.asarray(losses, dtype=np.float64)
        if self.horizon is None and self.fixed_eta is None:
            out = np.empty_like(losses)
            for t, row in enumerate(losses):
                out[t] = self.probabilities()
                self.update(row)
            return out
        cum = self.cum + np.vstack([np.zeros(self.N), np.cumsum(losses, axis=0)[:-1]])
        self.cum = self.cum + losses.sum(axis=0)
        self.t += len(losses)
        return _softmin(cum, self.eta)

    def state_dict(self):
        return {"kind": "hedge", "eta": self.eta, "D": self.D, "cum": self.cum.tolist(), "t": self.t}


def _softmin(cum: np.ndarray, eta: float) -> np.ndarray:
    z = -eta * (cum - cum.min(axis=-1, keepdims=True))
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


class Lopsided:
    """Two-expert Prod variant with O(1) regret to expert 2.

    Weight on expert 1 is ``s / (s + 1 - s1)``; after losses ``(g1, g2)``
    the state is updated as ``s <- s * (1 + eta * delta)`` with
    ``delta = (g2 - g1) / loss_range`` so that ``|delta| <= 1``.
    """

    def __init__(self, eta: float, s1: float, loss_range: float = 2.0):
        if not 0 < eta <= 0.5:
            raise ValueError(f"eta must lie in (0, 1/2], got {eta}")
        if not 0 < s1 < 1:
            raise ValueError(f"s1 must lie in (0, 1), got {s1}")
        self.eta = float(eta)
        self.s1 = float(s1)
        self.log_s = math.log(s1)  # s can leave float range over long horizons
        self.loss_range = float(loss_range)

    @classmethod
    def for_horizon(cls, T: int, loss_range: float = 2.0) -> "Lopsided":
        """Defaults: ``eta = min(1/2, sqrt(ln T / T))`` and initial weight ``s1 = eta``."""
        eta = min(0.5, math.sqrt(math.log(max(T, 2)) / max(T, 2)))
        return cls(eta, eta, loss_range)

    @property
    def s(self) -> float:
        return math.exp(min(self.log_s, 700.0))

    def weight(self) -> float:
        # s / (s + 1 - s1), evaluated stably in log space
        return 1.0 / (1.0 + (1.0 - self.s1) * math.exp(-self.log_s)) if self.log_s > -700 else 0.0

    def update(self, loss1: float, loss2: float) -> None:
        delta = (loss2 - loss1) / self.loss_range
        if abs(delta) > 1 + 1e-12:
            raise ValueError(f"normalized loss difference {delta} outside [-1, 1]")
        delta = max(-1.0, min(1.0, delta))
        self.log_s += math.log1p(self.eta * delta)

    def state_dict(self):
        return {"kind": "lopsided", "eta": self.eta, "s1": self.s1, "log_s": self.log_s,
                "loss_range": self.loss_range}


# -- spec strings -------------------------------------------------------------


def parse_kind(spec: str) -> tuple[str, dict]:
    """``"name:k=v,k2=v2"`` -> ``("name", {"k": v, ...})`` with numeric values."""
    spec = spec.strip()
    name, _, rest = spec.partition(":")
    params: dict = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, val = item.partition("=")
        if not eq:
            raise ValueError(f"malformed parameter {item!r} in {spec!r}")
        try:
            num = float(val)
            params[key.strip()] = int(num) if num.is_integer() and "." not in val and "e" not in val else num
        except ValueError:
            params[key.strip()] = val.strip()
    return name.strip().lower(), params


LEARNERS = ("ftl_brier", "ftl_log", "kt", "ewoo", "spl")


def learner_factory(spec: str, K: int, loss: Loss, rng=None) -> Callable[[], Learner]:
    """Factory of fresh learners from a spec string such as ``ewoo:eta=0.5,res=100``.

    Randomized learners draw child generators from ``rng`` so each copy owns
    its own stream.
    """
    name, params = parse_kind(spec)
    if name == "ftl_brier":
        _no_params(name, params)
        return lambda: FTLBrier(K)
    if name in ("ftl_log", "kt"):
        _no_params(name, params)
        return lambda: FTLLogKT(K)
    if name == "ewoo":
        _allowed(name, params, {"eta", "res"})
        eta, res = params.get("eta"), params.get("res")
        proto = EWOO(K, loss, eta, res)

        def make():
            fresh = EWOO.__new__(EWOO)
            fresh.__dict__.update(proto.__dict__)
            fresh.cum = np.zeros(len(proto.points))
            return fresh

        return make
    if name == "spl":
        _allowed(name, params, {"scale"})
        if not isinstance(loss, GridProper):
            raise ValueError("learner 'spl' requires a grid loss")
        parent = rng if rng is not None else np.random.default_rng(0)
        scale = float(params.get("scale", 1.0))
        return lambda: SimplePerturbedLeader(K, loss, scale, parent.spawn(1)[0])
    raise ValueError(f"unknown learner {name!r} (expected one of {', '.join(LEARNERS)})")


def _no_params(name, params):
    if params:
        raise ValueError(f"learner {name!r} takes no parameters, got {sorted(params)}")


def _allowed(name, params, allowed):
    extra = set(params) - allowed
    if extra:
        raise ValueError(f"unknown parameters {sorted(extra)} for {name!r}")
