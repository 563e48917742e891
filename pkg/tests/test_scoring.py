from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibeat.grid import grid_from_denominator
from calibeat.scoring import (
    BinLedger, Transcript, bin_key, calibeating_gap, calibration_closed_form, calibration_error, cumulative_loss,
    dump_ndjson, group_points, load_ndjson, pseudo_calibration, record, refinement, score,
)
from calibeat.simplex import Brier, LogLoss, entropy

BRIER, LOG = Brier(), LogLoss()
E1, E2 = 0, 1


def constant(p, ys):
    T = len(ys)
    return Transcript(np.tile(p, (T, 1)), np.tile(p, (T, 1)), ys)


class TestBinKey:
    def test_equal_points_equal_keys(self):
        assert bin_key([0.1 + 0.2, 0.7]) == bin_key([0.3, 0.7])

    def test_twelve_digits(self):
        assert bin_key([0.5, 0.5]) == "0.500000000000,0.500000000000"

    def test_group_points_first_appearance(self):
        P = np.array([[0.2, 0.8], [0.5, 0.5], [0.2, 0.8], [0.1, 0.9]])
        np.testing.assert_array_equal(group_points(P), [0, 1, 0, 2])


class TestLedger:
    def test_examples(self):
        led = BinLedger(2)
        record(led, "k", 0)
        assert led.visits("k") == 1 and led.counts("k").tolist() == [1, 0]
        record(led, "k", 1)
        assert led.visits("k") == 2 and led.counts("k").tolist() == [1, 1]
        record(led, "k2", 0)
        assert len(led) == 2 and led.rounds == 3


class TestCumulativeLoss:
    def test_examples(self):
        assert cumulative_loss(BRIER, constant([1.0, 0.0], [E1, E2])) == pytest.approx(2.0)
        assert cumulative_loss(BRIER, constant([0.5, 0.5], [E1, E2])) == pytest.approx(1.0)
        assert cumulative_loss(LOG, constant([0.5, 0.5], [E1, E2])) == pytest.approx(2 * math.log(2))


class TestRefinement:
    def test_examples(self):
        assert refinement(BRIER, ["a", "a"], [E1, E2]) == pytest.approx(1.0)
        assert refinement(BRIER, ["a", "b"], [E1, E2]) == 0.0
        assert refinement(LOG, ["a"] * 3, [E1, E1, E2]) == pytest.approx(3 * entropy([2 / 3, 1 / 3]))
        assert refinement(LOG, ["a"] * 3, [E1, E1, E2]) == pytest.approx(1.909543, abs=1e-6)

    def test_bin_additivity(self):
        rng = np.random.default_rng(0)
        ka, kb = rng.integers(0, 5, 300), rng.integers(5, 9, 200)
        ya, yb = rng.integers(0, 3, 300), rng.integers(0, 3, 200)
        for spec in (BRIER, LOG):
            whole = refinement(spec, np.concatenate([ka, kb]), np.concatenate([ya, yb]), K=3)
            parts = refinement(spec, ka, ya, K=3) + refinement(spec, kb, yb, K=3)
            assert whole == pytest.approx(parts, rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            refinement(BRIER, [], [])


class TestCalibration:
    def test_examples(self):
        assert calibration_error(BRIER, constant([1.0, 0.0], [E1, E2])) == pytest.approx(1.0)
        assert calibration_error(BRIER, constant([0.5, 0.5], [E1, E2])) == pytest.approx(0.0, abs=1e-12)
        assert calibration_error(LOG, constant([0.5, 0.5], [E1, E2])) == pytest.approx(0.0, abs=1e-12)

    @given(st.integers(0, 10**6), st.sampled_from([2, 3]), st.sampled_from(["brier", "log"]))
    @settings(max_examples=30, deadline=None)
    def test_decomposition_and_closed_form(self, seed, K, kind):
        spec = BRIER if kind == "brier" else LOG
        rng = np.random.default_rng(seed)
        pts = rng.dirichlet(np.ones(K), size=7)
        preds = pts[rng.integers(0, 7, 500)]
        tr = Transcript(preds, preds, rng.integers(0, K, 500))
        rep = score(spec, tr)
        L = rep.cumulative_loss
        assert abs(L - (rep.refinement_self + rep.calibration)) <= 1e-9 * max(1.0, L)
        assert rep.calibration >= -1e-9 and rep.refinement_self >= -1e-9
        closed = calibration_closed_form(spec, tr)
        assert abs(closed - rep.calibration) <= 1e-9 * max(1.0, L)


class TestPseudoCalibration:
    grid = grid_from_denominator(2, 2)  # (0,1), (.5,.5), (1,0)

    def tr(self, pi, ys, idx):
        T = len(ys)
        return Transcript(np.full((T, 2), 0.5), self.grid.points[idx], ys, np.array(pi), self.grid.points, idx)

    def test_examples(self):
        half = [0.0, 1.0, 0.0]
        assert pseudo_calibration(BRIER, self.tr([half, half], [E1, E2], [1, 1])) == pytest.approx(0.0)
        one = [0.0, 0.0, 1.0]
        assert pseudo_calibration(BRIER, self.tr([one, one], [E1, E2], [2, 2])) == pytest.approx(1.0)
        split = [0.5, 0.0, 0.5]
        assert pseudo_calibration(BRIER, self.tr([split], [E1], [2])) == pytest.approx(1.0)

    def test_needs_pi(self):
        with pytest.raises(ValueError):
            pseudo_calibration(BRIER, constant([0.5, 0.5], [E1]))

    def test_sample_outside_support(self):
        with pytest.raises(ValueError):
            self.tr([[1.0, 0.0, 0.0]], [E1], [2])

    def test_realized_tracks_pseudo(self):
        """Mean of K_T - pseudo K_T over 200 seeded runs is within 3 standard errors of 0."""
        T, M = 2000, self.grid.M
        rng = np.random.default_rng(123)
        pi = rng.dirichlet(np.ones(M), size=T)
        ys = (rng.random(T) < 0.3).astype(int)
        diffs = []
        for s in range(200):
            u = np.random.default_rng([s, 5]).random(T)
            idx = np.minimum((np.cumsum(pi, axis=1) < u[:, None]).sum(axis=1), M - 1)
            tr = Transcript(np.full((T, 2), 0.5), self.grid.points[idx], ys, pi, self.grid.points, idx)
            diffs.append(calibration_error(BRIER, tr) - pseudo_calibration(BRIER, tr))
        diffs = np.array(diffs)
        se = diffs.std(ddof=1) / math.sqrt(len(diffs))
        assert abs(diffs.mean()) <= 3 * se


class TestGap:
    def test_examples(self):
        q = np.full((2, 2), 0.5)
        tr = Transcript(q, q, [E1, E2])
        assert calibeating_gap(BRIER, tr, 0) == pytest.approx(0.0)
        tr = Transcript(q, np.tile([1.0, 0.0], (2, 1)), [E1, E2])
        assert calibeating_gap(BRIER, tr, 0) == pytest.approx(1.0)

    def test_ftl_two_pure_bins(self):
        # FTL plays uniform in each bin's first round; both bins are pure
        q = np.array([[0.2, 0.8], [0.7, 0.3]])
        tr = Transcript(q, np.full((2, 2), 0.5), [E1, E2])
        assert calibeating_gap(BRIER, tr, 0) == pytest.approx(1.0)

    def test_index_check(self):
        with pytest.raises(IndexError):
            calibeating_gap(BRIER, constant([0.5, 0.5], [E1]), 1)


class TestNdjson:
    def test_round_trip(self):
        rng = np.random.default_rng(3)
        grid = grid_from_denominator(3, 4)
        T = 20
        pi = rng.dirichlet(np.ones(grid.M), size=T)
        idx = rng.integers(0, grid.M, T)
        q = rng.dirichlet(np.ones(3), size=(T, 2))
        tr = Transcript(q, grid.points[idx], rng.integers(0, 3, T), pi, grid.points, idx)
        buf = io.StringIO()
        dump_ndjson(tr, buf)
        back = load_ndjson(io.StringIO(buf.getvalue()), grid.points)
        np.testing.assert_array_equal(back.forecasts, tr.forecasts)
        np.testing.assert_array_equal(back.pi, tr.pi)
        np.testing.assert_array_equal(back.prediction_index, idx)
        first = buf.getvalue().splitlines()[0]
        assert '"t": 1' in first and '"y"' in first
