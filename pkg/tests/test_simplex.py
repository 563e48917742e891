from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibeat.grid import grid_from_denominator
from calibeat.simplex import (
    Brier, DomainError, GridProper, LogLoss, bin_optimum, entropy, expected_loss, loss, make_loss, simplex_point,
)

BRIER, LOG = Brier(), LogLoss()


def simplex_vectors(K):
    return st.lists(st.floats(0.01, 1.0), min_size=K, max_size=K).map(lambda v: np.array(v) / np.sum(v))


class TestSimplexPoint:
    def test_renormalizes_within_tolerance(self):
        p = simplex_point([0.5, 0.5 + 5e-13])
        assert p.sum() == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("bad", [[0.5, 0.6], [1.2, -0.2], [1.0], [[0.5, 0.5]], [np.nan, 1.0]])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            simplex_point(bad)


class TestLossExamples:
    def test_brier(self):
        assert loss(BRIER, [0.5, 0.5], 0) == pytest.approx(0.5)
        assert loss(BRIER, [1.0, 0.0], 0) == 0.0

    def test_log(self):
        assert loss(LOG, [0.5, 0.5], 0) == pytest.approx(math.log(2))

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            loss(LOG, [1.0, 0.0], 1)

    def test_expected(self):
        assert expected_loss(BRIER, [0.5, 0.5], [0.5, 0.5]) == pytest.approx(0.5)
        assert expected_loss(BRIER, [1.0, 0.0], [1.0, 0.0]) == 0.0
        assert expected_loss(LOG, [0.5, 0.5], [0.25, 0.75]) == pytest.approx(math.log(2))

    def test_outcome_range(self):
        with pytest.raises(ValueError):
            loss(BRIER, [0.5, 0.5], 2)

    @given(simplex_vectors(3), st.integers(0, 2))
    def test_expected_on_basis_equals_loss(self, p, k):
        e = np.eye(3)[k]
        for spec in (BRIER, LOG):
            assert expected_loss(spec, p, e) == loss(spec, p, k)


class TestBinOptimum:
    def test_examples(self):
        p, v = bin_optimum(BRIER, [1, 1])
        np.testing.assert_allclose(p, [0.5, 0.5])
        assert v == pytest.approx(1.0)
        p, v = bin_optimum(LOG, [1, 1])
        assert v == pytest.approx(2 * math.log(2))
        p, v = bin_optimum(BRIER, [3, 0])
        np.testing.assert_allclose(p, [1.0, 0.0])
        assert v == 0.0

    def test_empty_bin(self):
        with pytest.raises(ValueError):
            bin_optimum(BRIER, [0, 0])

    @pytest.mark.parametrize("K", [2, 3])
    def test_brier_matches_lattice_search(self, K):
        lattice = grid_from_denominator(K, 1000).points
        rng = np.random.default_rng(K)
        for _ in range(5):
            c = rng.integers(0, 3, K).astype(float)
            c[0] += 1
            n = c.sum()
            brute = (n * (lattice**2).sum(axis=1) - 2 * lattice @ c + n).min()
            assert bin_optimum(BRIER, c)[1] == pytest.approx(brute, abs=1e-5)

    @given(st.lists(st.integers(0, 20), min_size=3, max_size=3).filter(lambda c: sum(c) > 0))
    @settings(max_examples=50)
    def test_log_value_is_n_entropy_and_minimal(self, counts):
        c = np.array(counts, dtype=float)
        n = c.sum()
        rho, v = bin_optimum(LOG, c)
        assert v == pytest.approx(n * entropy(c / n), abs=1e-10)
        interior = grid_from_denominator(3, 20).points
        interior = interior[(interior > 0).all(axis=1)]
        totals = -(np.log(interior) @ c)
        assert v <= totals.min() + 1e-12


class TestProperness:
    @pytest.mark.parametrize("spec", [BRIER, LOG], ids=["brier", "log"])
    @pytest.mark.parametrize("K", [2, 3])
    def test_truth_minimizes_on_grid(self, spec, K):
        pts = grid_from_denominator(K, 20).points
        if spec is LOG:
            pts = pts[(pts > 0).all(axis=1)]
        E = pts @ spec.loss_matrix(pts).T
        own = E[np.arange(len(pts)), np.arange(len(pts))]
        # exact membership in the argmin set
        assert np.all(own <= E.min(axis=1) + 1e-12)


class TestGridProper:
    def test_spherical_is_proper(self):
        g = GridProper.spherical(grid_from_denominator(3, 4).points)
        assert g.loss_range <= 1.0

    def test_rejects_improper_table(self):
        pts = grid_from_denominator(2, 4).points
        table = np.zeros((len(pts), 2))
        table[0] = -1.0  # one prediction dominates every belief
        with pytest.raises(ValueError, match="not proper"):
            GridProper(pts, table)

    def test_bin_optimum_by_enumeration(self):
        pts = grid_from_denominator(2, 10).points
        g = GridProper.from_loss(pts, lambda p, y: BRIER.loss(p, y))
        p, v = g.bin_optimum([3, 7])
        np.testing.assert_allclose(p, [0.3, 0.7])
        assert v == pytest.approx(BRIER.bin_optimum([3, 7])[1])

    def test_unknown_prediction(self):
        g = GridProper.spherical(grid_from_denominator(2, 2).points)
        with pytest.raises(DomainError):
            g.loss_matrix([[0.3, 0.7]])


class TestMakeLoss:
    def test_kinds(self):
        assert isinstance(make_loss("brier"), Brier)
        assert isinstance(make_loss({"kind": "log"}), LogLoss)
        g = make_loss({"kind": "grid", "K": 2, "m": 4})
        assert len(g.points) == 5

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_loss("hinge")
