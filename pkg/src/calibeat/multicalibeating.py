"""Multi-calibeating: one calibeating engine per forecaster, aggregated as experts.

``mode="mixture"`` plays the exponential-weights mean of the candidates
(sound for exp-concave losses such as Brier and log).  ``mode="sampling"``
follows one candidate drawn by Hedge, which works for any bounded loss.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .calibeating import CalibeatingEngine, ProtocolError
from .learners import ExpWeights, Hedge, default_eta, parse_kind
from .scoring import per_round_losses
from .simplex import GridProper, Loss, check_outcome


class MultiEngine:
    def __init__(self, N: int, learner_spec: str, loss: Loss, K: int, mode: Optional[str] = None,
                 aggregator: Optional[str] = None, horizon: Optional[int] = None, rng=None):
        self.N = N
        self.K = K
        self.loss = loss
        if mode is None:
            mode = "sampling" if isinstance(loss, GridProper) else "mixture"
        if mode not in ("mixture", "sampling"):
            raise ValueError(f"unknown aggregation mode {mode!r}")
        self.mode = mode
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.engines = [CalibeatingEngine.from_spec(learner_spec, loss, K, self.rng) for _ in range(N)]
        self.aggregator = make_aggregator(aggregator, mode, N, loss, horizon)
        self._candidates: Optional[np.ndarray] = None

    def weights(self) -> np.ndarray:
        if self.mode == "mixture":
            return self.aggregator.weights()
        return self.aggregator.probabilities()

    def predict(self, forecasts, keys=None, rng=None) -> tuple[np.ndarray, np.ndarray]:
        forecasts = np.asarray(forecasts, dtype=np.float64)
        if len(forecasts) != self.N:
            raise ValueError(f"expected {self.N} forecasts, got {len(forecasts)}")
        cands = np.array([
            eng.predict(forecasts[n], None if keys is None else keys[n])
            for n, eng in enumerate(self.engines)
        ])
        self._candidates = cands
        if self.mode == "mixture":
            return self.aggregator.predict(cands), cands
        idx = self.aggregator.sample(rng if rng is not None else self.rng)
        return cands[idx].copy(), cands

    def update(self, forecasts, y: int, keys=None) -> None:
        if self._candidates is None:
            raise ProtocolError("update without a preceding predict")
        y = check_outcome(y, self.K)
        forecasts = np.asarray(forecasts, dtype=np.float64)
        for n, eng in enumerate(self.engines):
            eng.update(forecasts[n], y, None if keys is None else keys[n])
        losses = self.loss.loss_matrix(self._candidates)[:, y]
        self.aggregator.update(losses)
        self._candidates = None

    predict_round = predict

    def update_round(self, forecasts, y, keys=None):
        self.update(forecasts, y, keys)

    def run_batch(self, forecasts, outcomes, keys=None, rng=None) -> dict:
        """Whole-stream processing; identical to round-by-round for an oblivious stream.

        Returns ``predictions`` (played points), ``candidates`` ``(T, N, K)``,
        ``weights`` ``(T, N)`` (mixture weights or Hedge probabilities),
        ``candidate_losses`` ``(T, N)`` and ``expected_losses`` ``(T,)``.
        """
        forecasts = np.asarray(forecasts, dtype=np.float64)
        outcomes = np.asarray(outcomes, dtype=np.int64)
        T = outcomes.size
        cands = np.empty((T, self.N, self.K))
        for n, eng in enumerate(self.engines):
            cands[:, n] = eng.run_batch(forecasts[:, n], outcomes, None if keys is None else keys[:, n])
        closs = np.column_stack([per_round_losses(self.loss, cands[:, n], outcomes) for n in range(self.N)])
        if self.mode == "mixture":
            w = self.aggregator.replay_weights(closs)
            preds = np.einsum("tn,tnk->tk", w, cands)
            exp_loss = per_round_losses(self.loss, preds, outcomes)
        else:
            w = self.aggregator.replay_probabilities(closs)
            r = rng if rng is not None else self.rng
            u = r.random(T)
            idx = np.minimum((np.cumsum(w, axis=1) < u[:, None]).sum(axis=1), self.N - 1)
            preds = cands[np.arange(T), idx]
            exp_loss = (w * closs).sum(axis=1)
        return {
            "predictions": preds,
            "candidates": cands,
            "weights": w,
            "candidate_losses": closs,
            "expected_losses": exp_loss,
        }


def make_aggregator(spec: Optional[str], mode: str, N: int, loss: Loss, horizon: Optional[int]):
    if spec is None:
        spec = "expweights" if mode == "mixture" else "hedge"
    name, params = parse_kind(spec)
    if name == "expweights":
        if mode != "mixture":
            raise ValueError("expweights aggregation requires mixture mode")
        return ExpWeights(N, float(params.get("eta", default_eta(loss))))
    if name == "hedge":
        if mode != "sampling":
            raise ValueError("hedge aggregation requires sampling mode")
        D = float(params.get("range", loss.loss_range))
        if not np.isfinite(D):
            raise ValueError("hedge needs a bounded loss or an explicit range=")
        anytime = bool(params.get("anytime", 0))
        eta = params.get("eta")
        return Hedge(N, D, None if anytime else horizon, None if eta is None else float(eta))
    raise ValueError(f"unknown aggregator {name!r}")
