from __future__ import annotations

import json
import math

import numpy as np
import pytest

from calibeat.calibeating import CalibeatingEngine, ProtocolError, Rate, gap_bound
from calibeat.scoring import Transcript, bin_key, calibeating_gap, cumulative_loss, per_round_losses, refinement
from calibeat.simplex import Brier, LogLoss

BRIER, LOG = Brier(), LogLoss()
A, B = np.array([0.3, 0.7]), np.array([0.6, 0.4])


def engine(spec="ftl_brier", loss=BRIER, K=2):
    return CalibeatingEngine.from_spec(spec, loss, K)


def play(eng, qs, ys):
    out = []
    for q, y in zip(qs, ys):
        out.append(eng.predict(q))
        eng.update(q, y)
    return np.array(out)


def binned_stream(seed, Q, T, K=2):
    rng = np.random.default_rng(seed)
    pts = rng.dirichlet(np.ones(K), size=Q)
    truth = rng.dirichlet(np.ones(K), size=Q)
    cells = rng.integers(0, Q, T)
    ys = np.array([rng.choice(K, p=truth[c]) for c in cells])
    return pts[cells], ys


class TestPredictUpdate:
    def test_fresh_bin_is_uniform(self):
        np.testing.assert_allclose(engine(K=3).predict([0.2, 0.3, 0.5]), np.full(3, 1 / 3))

    def test_bin_mean(self):
        eng = engine()
        play(eng, [A, A], [0, 0])
        np.testing.assert_allclose(eng.predict(A), [1.0, 0.0])

    def test_isolation(self):
        eng = engine()
        before = eng.predict(B)
        eng.update(B, 1)
        after = eng.predict(B)
        eng.update(B, 1)
        play(eng, [A] * 5, [0] * 5)
        np.testing.assert_array_equal(eng.predict(B), [0.0, 1.0])
        assert not np.allclose(before, after)

    def test_counts(self):
        eng = engine()
        play(eng, [A] * 3, [0, 1, 0])
        assert eng.bins[bin_key(A)].counts.tolist() == [2, 1]

    def test_alternating_pure_bins(self):
        eng = engine()
        play(eng, [A, B] * 6, [0, 1] * 6)
        assert eng.bins[bin_key(A)].counts.tolist() == [6, 0]
        assert eng.bins[bin_key(B)].counts.tolist() == [0, 6]

    def test_round_robin_bookkeeping(self):
        eng = engine()
        pts = np.random.default_rng(0).dirichlet([1, 1], size=10)
        T = 10**4
        qs = pts[np.arange(T) % 10]
        eng.run_batch(qs, np.zeros(T, dtype=int))
        assert sorted(eng.bin_update_counts().values()) == [1000] * 10
        assert eng.round_count == T

    def test_protocol_errors(self):
        eng = engine()
        with pytest.raises(ProtocolError):
            eng.update(A, 0)
        eng.predict(A)
        with pytest.raises(ProtocolError):
            eng.update(B, 0)
        eng.update(A, 0)
        with pytest.raises(ProtocolError):
            eng.update(A, 0)

    def test_outcome_range(self):
        eng = engine()
        eng.predict(A)
        with pytest.raises(ValueError):
            eng.update(A, 5)


class TestBatch:
    @pytest.mark.parametrize("spec,loss", [("ftl_brier", BRIER), ("kt", LOG), ("ewoo:res=20", BRIER)])
    def test_batch_equals_rounds(self, spec, loss):
        qs, ys = binned_stream(1, 5, 400, K=3)
        a, b = engine(spec, loss, 3), engine(spec, loss, 3)
        np.testing.assert_allclose(a.run_batch(qs, ys), play(b, qs, ys), atol=1e-12)
        assert json.dumps(a.snapshot(), sort_keys=True) == json.dumps(b.snapshot(), sort_keys=True)

    def test_snapshot_restore_continues(self):
        qs, ys = binned_stream(2, 4, 300)
        full = engine()
        ref = full.run_batch(qs, ys)
        half = engine()
        half.run_batch(qs[:150], ys[:150])
        snap = json.loads(json.dumps(half.snapshot()))
        back = CalibeatingEngine.restore(snap, BRIER)
        np.testing.assert_allclose(back.run_batch(qs[150:], ys[150:]), ref[150:])

    def test_deterministic(self):
        qs, ys = binned_stream(3, 6, 500)
        np.testing.assert_array_equal(engine().run_batch(qs, ys), engine().run_batch(qs, ys))


class TestGapIdentity:
    @pytest.mark.parametrize("spec,loss", [("ftl_brier", BRIER), ("kt", LOG)])
    def test_subsequence_regret_sum(self, spec, loss):
        qs, ys = binned_stream(4, 7, 2000, K=3)
        eng = engine(spec, loss, 3)
        preds = eng.run_batch(qs, ys)
        keys = [bin_key(q) for q in qs]
        per_bin = 0.0
        losses = per_round_losses(loss, preds, ys)
        for k in set(keys):
            rows = np.array([i for i, kk in enumerate(keys) if kk == k])
            per_bin += losses[rows].sum() - loss.bin_optimum(np.bincount(ys[rows], minlength=3))[1]
        tr = Transcript(qs[:, None, :], preds, ys)
        total = cumulative_loss(loss, tr) - refinement(loss, keys, ys, K=3)
        assert per_bin == pytest.approx(total, rel=1e-10, abs=1e-9)
        assert calibeating_gap(loss, tr, 0) == pytest.approx(total, rel=1e-10, abs=1e-9)


class TestGapBound:
    def test_examples(self):
        assert gap_bound(Rate("log"), 1, math.e - 1) == pytest.approx(1.0)
        assert gap_bound(Rate("sqrt"), 4, 400) == pytest.approx(40.0)
        assert gap_bound(Rate("log", c=2.0), 10, 10**4) == pytest.approx(20 * math.log(1001))
        assert gap_bound(Rate("sqrt_k", K=3), 3, 12) == pytest.approx(3 * math.sqrt(12))

    def test_bad(self):
        with pytest.raises(ValueError):
            Rate("linear")
        with pytest.raises(ValueError):
            gap_bound(Rate("log"), 0, 10)
