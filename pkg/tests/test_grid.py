from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibeat.grid import (
    GridCapacityError, build_grid, compositions, dense, grid_from_denominator, grid_size, round_many, round_to_grid,
)
from calibeat.simplex import Brier


class TestBuildGrid:
    def test_examples(self):
        g = build_grid(2, 0.5)
        assert g.m == 2 and g.M == 3
        np.testing.assert_array_equal(g.points, [[0, 1], [0.5, 0.5], [1, 0]])
        assert build_grid(3, 0.5).M == 6
        assert build_grid(2, 0.01).M == 101

    def test_lexicographic(self):
        comps = compositions(4, 3)
        assert [tuple(c) for c in comps] == sorted(tuple(c) for c in comps)
        assert len(comps) == grid_size(3, 4)

    @pytest.mark.parametrize("K,m", [(2, 7), (3, 5), (4, 3)])
    def test_rank_inverts_enumeration(self, K, m):
        g = grid_from_denominator(K, m)
        np.testing.assert_array_equal(g.rank(g.compositions), np.arange(g.M))
        assert g.index(g.points[g.M // 2]) == g.M // 2

    @pytest.mark.parametrize("K,eps", [(1, 0.5), (2, 0.0), (2, 1.0)])
    def test_bad_arguments(self, K, eps):
        with pytest.raises(ValueError):
            build_grid(K, eps)

    def test_capacity(self):
        with pytest.raises(GridCapacityError):
            build_grid(8, 0.01)


class TestRounding:
    def test_vertex_is_point_mass(self):
        g = grid_from_denominator(3, 4)
        for i in (0, 5, g.M - 1):
            assert round_to_grid(g, g.points[i]) == {i: 1.0}

    def test_interval_example(self):
        g = build_grid(2, 0.5)
        assert round_to_grid(g, [0.25, 0.75]) == pytest.approx({0: 0.5, 1: 0.5})

    def test_sampling_mean_within_three_sigma(self):
        g = grid_from_denominator(3, 2)
        rng = np.random.default_rng(11)
        q = rng.dirichlet(np.ones(3))
        w = dense(round_to_grid(g, q), g.M)
        np.testing.assert_allclose(w @ g.points, q, atol=1e-12)
        draws = g.points[rng.choice(g.M, size=1000, p=w)]
        sigma = np.sqrt((w @ g.points**2 - (w @ g.points) ** 2) / 1000)
        assert np.all(np.abs(draws.mean(axis=0) - q) <= 3 * sigma + 1e-12)

    @pytest.mark.parametrize("K", [2, 3])
    @pytest.mark.parametrize("m", [2, 10, 50])
    def test_unbiased_and_tight(self, K, m):
        g = grid_from_denominator(K, m)
        Q = np.random.default_rng(K * 100 + m).dirichlet(np.ones(K), size=1000)
        idx, w = round_many(g, Q)
        assert np.all(np.count_nonzero(w, axis=1) <= K)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        verts = g.points[idx]
        mean = np.einsum("nk,nkj->nj", w, verts)
        assert np.max(np.abs(mean - Q)) <= 1e-12
        spread = np.einsum("nk,nk->n", w, ((verts - Q[:, None, :]) ** 2).sum(axis=2))
        assert np.all(spread <= 2 / m**2 + 1e-12)
        dist = np.sqrt(((verts - Q[:, None, :]) ** 2).sum(axis=2))
        assert np.all(dist[w > 0] <= np.sqrt(2) / m + 1e-12)

    @given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3).filter(lambda v: sum(v) > 0.01),
           st.integers(0, 2))
    @settings(max_examples=100)
    def test_brier_overhead_identity(self, v, y):
        g = grid_from_denominator(3, 7)
        q = np.array(v) / sum(v)
        w = dense(round_to_grid(g, q), g.M)
        spec = Brier()
        lhs = w @ spec.loss_matrix(g.points)[:, y] - spec.loss(q, y)
        rhs = w @ ((g.points - q) ** 2).sum(axis=1)
        assert lhs == pytest.approx(rhs, abs=1e-12)
        assert rhs <= 2 / 49 + 1e-12

    def test_batch_matches_single(self):
        g = grid_from_denominator(4, 6)
        Q = np.random.default_rng(2).dirichlet(np.ones(4), size=20)
        idx, w = round_many(g, Q)
        for n, q in enumerate(Q):
            np.testing.assert_allclose(dense(round_to_grid(g, q), g.M),
                                       np.bincount(idx[n], weights=w[n], minlength=g.M), atol=1e-15)
