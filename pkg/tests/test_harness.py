from __future__ import annotations

import json
import math

import numpy as np
import pytest

from calibeat.harness import (
    AdversarialFlip, ConfigError, IidBinned, LowerBoundStyle, MultiForecaster, RunConfig, best_swap_oracle,
    checkpoints, csv_text, generate, generate_round, parse_algorithm, rate_fit, remap_value, run, scenario_from_dict,
    write_result,
)
from calibeat.simplex import Brier

BRIER = Brier()


class TestGenerate:
    def test_pure_bin(self):
        s = generate(IidBinned([[0.3, 0.7]], [[1.0, 0.0]]), 100, seed=1)
        assert np.all(s.outcomes == 0)

    def test_round_robin(self):
        sc = IidBinned([[0.2, 0.8], [0.7, 0.3]], [[0.5, 0.5]] * 2, schedule="round_robin")
        assert generate(sc, 4, seed=0).cells.tolist() == [0, 1, 0, 1]

    def test_same_seed_same_stream(self):
        sc = MultiForecaster(3, 4)
        a, b = generate(sc, 500, 9), generate(sc, 500, 9)
        np.testing.assert_array_equal(a.outcomes, b.outcomes)
        np.testing.assert_array_equal(a.forecasts, b.forecasts)
        assert not np.array_equal(a.outcomes, generate(sc, 500, 10).outcomes)

    def test_replicates_differ(self):
        sc = IidBinned.spread(3)
        assert not np.array_equal(generate(sc, 200, 1, 0).outcomes, generate(sc, 200, 1, 1).outcomes)

    @pytest.mark.parametrize("t", [0, 17, 999])
    def test_round_isolation(self, t):
        sc = IidBinned.spread(5, K=3)
        full = generate(sc, 1000, 4, replicate=2)
        one = generate_round(sc, t, 4, replicate=2)
        assert one.outcomes[0] == full.outcomes[t] and one.cells[0] == full.cells[t]

    def test_prefix_stable(self):
        sc = LowerBoundStyle(3)
        np.testing.assert_array_equal(generate(sc, 50, 2).outcomes, generate(sc, 80, 2).outcomes[:50])

    def test_flip(self):
        s = generate(AdversarialFlip(3), 12, 0)
        assert s.outcomes.tolist() == [0, 0, 0, 1, 1, 1] * 2

    def test_multi_forecasters_calibrated_groups(self):
        sc = MultiForecaster(4, 3, cells=12)
        lay = sc.layout()
        for n in range(4):
            assert len({tuple(f) for f in lay.forecasts[n]}) == 3

    def test_zero_probability_outcomes_never_drawn(self):
        sc = IidBinned([[0.5, 0.5]], [[0.0, 1.0]])
        assert np.all(generate(sc, 1000, 3).outcomes == 1)


class TestConfig:
    def test_bad_fields(self):
        with pytest.raises(ConfigError) as info:
            RunConfig(IidBinned.spread(2), 100, algorithm="engine=calibeat;learner=bogus")
        assert info.value.field == "algorithm.learner"
        with pytest.raises(ConfigError):
            RunConfig(IidBinned.spread(2), 100, metrics_stride=7)
        with pytest.raises(ConfigError):
            RunConfig(IidBinned.spread(2), 0)
        with pytest.raises(ConfigError):
            RunConfig(IidBinned.spread(2), 100, algorithm="engine=simul", loss="log")

    def test_unknown_scenario(self):
        with pytest.raises(ConfigError):
            scenario_from_dict({"kind": "tornado"})

    def test_round_trip(self):
        cfg = RunConfig(MultiForecaster(2, 3), 256, 5, "engine=multi;learner=kt", "log", 0, 2, "x")
        back = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back.to_dict() == cfg.to_dict() and back.config_hash() == cfg.config_hash()

    def test_hash_ignores_seed(self):
        a = RunConfig(IidBinned.spread(2), 100, seed=1)
        b = RunConfig(IidBinned.spread(2), 100, seed=2)
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != RunConfig(IidBinned.spread(3), 100).config_hash()

    def test_parse_algorithm(self):
        alg = parse_algorithm("engine=simul;eps=0.25")
        assert alg == {"engine": "simul", "learner": "ftl_brier", "eps": 0.25, "reference": "calibeat"}
        with pytest.raises(ConfigError):
            parse_algorithm("engine=quantum")

    def test_checkpoints(self):
        assert checkpoints(10, None).tolist() == [1, 2, 4, 8, 10]
        assert checkpoints(8, 0).tolist() == [8]
        assert checkpoints(9, 3).tolist() == [3, 6, 9]


class TestRun:
    def test_two_round_example(self):
        cfg = RunConfig(IidBinned([[0.4, 0.6]], [[1.0, 0.0]]), 2, seed=0)
        final = run(cfg).final
        assert final["L"] == pytest.approx(0.5)
        assert final["R_self"] == pytest.approx(0.0, abs=1e-12)
        assert final["R_f"] == [0.0] and final["gap"] == [pytest.approx(0.5)]

    def test_decomposition_every_checkpoint(self):
        for alg in ("engine=calibeat", "engine=multi", "engine=simul;eps=0.2"):
            sc = MultiForecaster(3, 3) if "multi" in alg else IidBinned.spread(3)
            res = run(RunConfig(sc, 600, 3, alg))
            for row in res.mean:
                assert abs(row["L"] - row["R_self"] - row["K"]) <= 1e-9 * max(1, row["L"])
            assert [r["t"] for r in res.mean] == sorted(r["t"] for r in res.mean)

    def test_replicates_reproducible(self):
        cfg = RunConfig(IidBinned.spread(4), 300, 8, replicates=3)
        a, b = run(cfg), run(cfg, threads=3)
        assert a.replicates == b.replicates and len(a.replicates) == 3

    def test_single_forecaster_multi_equals_calibeat(self):
        sc = MultiForecaster(1, 4)
        a = run(RunConfig(sc, 512, 2, "engine=calibeat")).final
        b = run(RunConfig(sc, 512, 2, "engine=multi")).final
        for key in ("L", "R_self", "K", "R_f", "gap"):
            assert a[key] == pytest.approx(b[key], abs=1e-12)
        assert b["agg_regret"] == pytest.approx(0.0, abs=1e-12)

    def test_simul_diagnostics(self):
        final = run(RunConfig(IidBinned.spread(2), 1024, 0, "engine=simul")).final
        assert final["residual_max"] <= 1e-10
        assert final["Ktilde"] >= 0 and 0 <= final["w_mean"] <= 1 and final["swap_regret"] is not None

    def test_files(self, tmp_path):
        cfg = RunConfig(MultiForecaster(2, 2), 64, 7, "engine=multi", replicates=2)
        res = run(cfg)
        paths = write_result(res, tmp_path)
        assert len(paths) == 4
        stem = f"{cfg.config_hash()}_7_1"
        assert (tmp_path / f"{stem}.json").exists()
        header = (tmp_path / f"{stem}.csv").read_text().splitlines()[0]
        assert header == "t,L,R_self,R_f1,R_f2,K,Ktilde,gap_1,gap_2,agg_regret,w_mean,L_exp"
        doc = json.loads((tmp_path / f"{stem}.json").read_text())
        assert doc["seed"] == 7 and doc["config"]["T"] == 64 and "wall_clock" not in doc

    def test_csv_blank_for_missing(self):
        rows = [{"t": 1, "L": 0.5, "R_self": 0.0, "R_f": [0.0], "K": 0.5, "Ktilde": None, "gap": [0.5],
                 "agg_regret": None, "w_mean": None, "L_exp": 0.5}]
        assert csv_text(rows, 1).splitlines()[1] == "1,0.5,0.0,0.0,0.5,,0.5,,,0.5"


class TestSwapOracle:
    points = np.array([[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]])

    def test_point_mass(self):
        ys = np.array([0, 0, 1, 0])
        pi = np.tile([0.0, 1.0, 0.0], (4, 1))
        remap, value = best_swap_oracle(BRIER, pi, ys, self.points)
        np.testing.assert_allclose(remap[1], [0.75, 0.25])
        assert value == pytest.approx(4 * 2 * 0.75 * 0.25)

    def test_calibrated_identity(self):
        ys = np.array([0, 1, 1, 0])
        pi = np.tile([0.0, 1.0, 0.0], (4, 1))
        remap, _ = best_swap_oracle(BRIER, pi, ys, self.points)
        np.testing.assert_allclose(remap[1], self.points[1])

    def test_enumeration(self):
        rng = np.random.default_rng(0)
        pi = rng.dirichlet(np.ones(3), size=50)
        ys = rng.integers(0, 2, 50)
        remap, value = best_swap_oracle(BRIER, pi, ys, self.points)
        assert value == pytest.approx(remap_value(BRIER, pi, ys, remap))
        assert value <= remap_value(BRIER, pi, ys, self.points) + 1e-12
        alternatives = np.linspace(0, 1, 101)
        for i in range(3):
            for a in alternatives:
                alt = remap.copy()
                alt[i] = [a, 1 - a]
                assert value <= remap_value(BRIER, pi, ys, alt) + 1e-12
        for _ in range(100):
            alt = rng.dirichlet(np.ones(2), size=3)
            assert value <= remap_value(BRIER, pi, ys, alt) + 1e-12


class TestRateFit:
    ts = 2.0 ** np.arange(4, 16)

    def test_log(self):
        fit = rate_fit(self.ts, 3 + 2 * np.log(self.ts), "log")
        assert fit.coefficients == pytest.approx((3, 2)) and fit.max_rel_residual <= 1e-9

    def test_sqrt(self):
        fit = rate_fit(self.ts, 5 * np.sqrt(self.ts), "sqrt")
        assert fit.coefficients[1] == pytest.approx(5)

    def test_sqrt_log(self):
        fit = rate_fit(self.ts, 1 + 0.5 * np.sqrt(self.ts * np.log(self.ts)), "sqrt_log")
        assert fit.coefficients == pytest.approx((1, 0.5))

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate"):
            rate_fit([10, 20, 40, 80], [1, 2, 3, 4], "log")
        with pytest.raises(ValueError):
            rate_fit(self.ts, self.ts, "cubic")

    def test_ftl_gap_prefers_log_shape(self):
        res = run(RunConfig(IidBinned.spread(5), 2**15, 1000, replicates=4))
        rows = [r for r in res.mean if r["t"] >= 2**6]
        ts = [r["t"] for r in rows]
        gaps = [r["gap"][0] for r in rows]
        assert rate_fit(ts, gaps, "log").max_rel_residual < rate_fit(ts, gaps, "sqrt").max_rel_residual
