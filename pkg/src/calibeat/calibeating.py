"""Bin-wise no-regret calibeating.

One independent copy of a no-regret learner is kept per distinct external
forecast value and is created the first time that value is seen.  The
engine enforces predict-then-update: ``update`` must follow a ``predict``
on the same forecast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Hashable, Optional

import numpy as np

from .learners import Learner, learner_factory
from .scoring import bin_key, group_points
from .simplex import Loss, check_outcome, simplex_point


class ProtocolError(RuntimeError):
    """Out-of-order predict/update call."""


class CalibeatingEngine:
    def __init__(self, factory: Callable[[], Learner], loss: Loss, K: int, learner_spec: str = ""):
        self.factory = factory
        self.loss = loss
        self.K = K
        self.learner_spec = learner_spec
        self.bins: dict[Hashable, Learner] = {}
        self.round_count = 0
        self._pending: Optional[Hashable] = None

    @classmethod
    def from_spec(cls, spec: str, loss: Loss, K: int, rng=None) -> "CalibeatingEngine":
        return cls(learner_factory(spec, K, loss, rng), loss, K, spec)

    def _key(self, q, key):
        if key is not None:
            return key
        return bin_key(simplex_point(q))

    def predict(self, q, key: Optional[Hashable] = None) -> np.ndarray:
        k = self._key(q, key)
        learner = self.bins.get(k)
        if learner is None:
            learner = self.bins[k] = self.factory()
        self._pending = k
        return learner.predict()

    def update(self, q, y: int, key: Optional[Hashable] = None) -> None:
        k = self._key(q, key)
        if self._pending is None or self._pending != k:
            raise ProtocolError(f"update for bin {k!r} without a matching predict")
        self.bins[k].update(check_outcome(y, self.K))
        self._pending = None
        self.round_count += 1

    # round-level protocol shared with the other engines
    def predict_round(self, forecasts, keys=None) -> np.ndarray:
        return self.predict(np.asarray(forecasts)[0], None if keys is None else keys[0])

    def update_round(self, forecasts, y, keys=None) -> None:
        self.update(np.asarray(forecasts)[0], y, None if keys is None else keys[0])

    def run_batch(self, forecasts, outcomes, keys=None) -> np.ndarray:
        """Process a whole oblivious stream; returns the ``(T, K)`` predictions.

        Bins never interact, so each bin's subsequence is replayed through its
        learner in one call.  The result and the final engine state match
        round-by-round processing exactly.
        """
        if self._pending is not None:
            raise ProtocolError("run_batch called between predict and update")
        outcomes = np.asarray(outcomes, dtype=np.int64)
        if keys is None:
            forecasts = np.atleast_2d(np.asarray(forecasts, dtype=np.float64))
            ids = group_points(forecasts)
            first = np.unique(ids, return_index=True)[1]
            labels = [bin_key(forecasts[i]) for i in first]
        else:
            keys = list(keys)
            lookup: dict = {}
            ids = np.array([lookup.setdefault(k, len(lookup)) for k in keys], dtype=np.int64)
            labels = list(lookup)
        preds = np.empty((outcomes.size, self.K))
        order = np.argsort(ids, kind="stable")
        bounds = np.searchsorted(ids[order], np.arange(len(labels) + 1))
        for b, label in enumerate(labels):
            rows = order[bounds[b] : bounds[b + 1]]
            learner = self.bins.get(label)
            if learner is None:
                learner = self.bins[label] = self.factory()
            preds[rows] = learner.replay(outcomes[rows])
        self.round_count += outcomes.size
        return preds

    def bin_update_counts(self) -> dict:
        return {k: v.t for k, v in self.bins.items()}

    def snapshot(self) -> dict:
        return {
            "learner": self.learner_spec,
            "loss": self.loss.to_dict(),
            "K": self.K,
            "round_count": self.round_count,
            "bins": {str(k): v.state_dict() for k, v in self.bins.items()},
        }

    @classmethod
    def restore(cls, snap: dict, loss: Loss, rng=None) -> "CalibeatingEngine":
        eng = cls.from_spec(snap["learner"], loss, snap["K"], rng)
        eng.round_count = snap["round_count"]
        for key, state in snap["bins"].items():
            learner = eng.factory()
            for attr, val in state.items():
                if attr == "kind":
                    continue
                cur = getattr(learner, attr, None)
                setattr(learner, attr, np.array(val) if isinstance(cur, np.ndarray) else val)
            eng.bins[key] = learner
        return eng


@dataclass(frozen=True)
class Rate:
    """Concave rate shapes: ``c*log(1+t)``, ``c*sqrt(t)`` and ``c*sqrt(K*t)``."""

    kind: str
    c: float = 1.0
    K: int = 1

    def __post_init__(self):
        if self.kind not in ("log", "sqrt", "sqrt_k"):
            raise ValueError(f"unsupported rate shape {self.kind!r}")

    def __call__(self, t: float) -> float:
        if self.kind == "log":
            return self.c * math.log1p(t)
        if self.kind == "sqrt":
            return self.c * math.sqrt(t)
        return self.c * math.sqrt(self.K * t)


def gap_bound(alpha: Rate, q_size: int, T: float) -> float:
    """``|Q| * alpha(T / |Q|)``: the calibeating bound from a per-bin regret rate."""
    if q_size < 1:
        raise ValueError("need at least one forecast value")
    return q_size * alpha(T / q_size)
