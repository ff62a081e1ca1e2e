import json

import numpy as np
import pytest

from mihedge.functionals import Always, CorridorExit, FunctionalSpec, LevelSet, Never, quadratic_covariation
from mihedge.paths import (GBM, Absorbed, Bubble, ConvexClaimMarket, Heston, InfeasibleMarket, LocalVol, Path,
                           Smile, Spliced, TimeGrid, bubble_path, market_paths_convex, model_from_dict,
                           simulate, splice)
from mihedge.payoffs import Payoff, black_price

HESTON = Heston(s0=1.0, v0=0.04, kappa=1.5, theta=0.04, xi=0.3, rho=-0.7)
SMILE = LocalVol(1.0, Smile(0.2, -0.1, 0.3), 0.05, 1.0)


class TestTimeGrid:
    def test_uniform(self):
        g = TimeGrid.uniform(1.0, 4)
        assert g.T == 1.0
        assert g.n_steps == 4
        assert g.max_step == pytest.approx(0.25)

    @pytest.mark.parametrize("times", [[0.1, 0.2], [0.0, 0.5, 0.5], [0.0], [0.0, -1.0]])
    def test_rejects_bad_grids(self, times):
        with pytest.raises(ValueError):
            TimeGrid(np.array(times))

    def test_path_length_checked(self):
        with pytest.raises(ValueError):
            Path(TimeGrid.uniform(1.0, 4), np.ones(3))


class TestSimulate:
    def test_zero_vol_is_constant(self):
        ps = simulate(GBM(1.0, 0.0), TimeGrid.uniform(3.0, 50), seed=123, n_paths=4)
        assert np.all(ps.components["S"] == 1.0)

    def test_gbm_martingale(self):
        # the log scheme is exact, so the terminal law does not depend on the step count
        ps = simulate(GBM(1.0, 0.2), TimeGrid.uniform(1.0, 64), seed=1, n_paths=100_000)
        sT = ps.components["S"][:, -1]
        se = sT.std(ddof=1) / np.sqrt(sT.size)
        assert abs(sT.mean() - 1.0) < 3 * se

    def test_heston_integrated_variance(self):
        ps = simulate(HESTON, TimeGrid.uniform(1.0, 256), seed=2, n_paths=4000)
        iv = ps.aux["integrated_variance"][:, -1]
        se = iv.std(ddof=1) / np.sqrt(iv.size)
        assert abs(iv.mean() - 0.04) < 3 * se

    @pytest.mark.parametrize("model", [HESTON, SMILE, GBM(2.0, 0.5)], ids=["heston", "localvol", "gbm"])
    def test_martingale_property(self, model):
        ps = simulate(model, TimeGrid.uniform(1.0, 128), seed=5, n_paths=10_000)
        sT = ps.components["S"][:, -1]
        se = sT.std(ddof=1) / np.sqrt(sT.size)
        assert abs(sT.mean() - model.s0) < 4 * se

    @pytest.mark.parametrize("model", [HESTON, SMILE, GBM(1.0, 0.3)], ids=["heston", "localvol", "gbm"])
    def test_prices_positive(self, model):
        ps = simulate(model, TimeGrid.uniform(2.0, 256), seed=9, n_paths=500)
        assert np.all(ps.components["S"] > 0)

    def test_deterministic_and_chunk_independent(self):
        grid = TimeGrid.uniform(1.0, 100)
        a = simulate(HESTON, grid, seed=42, n_paths=10)
        b = simulate(HESTON, grid, seed=42, n_paths=10)
        c = simulate(HESTON, grid, seed=42, n_paths=4, first_path=6)
        assert np.array_equal(a.components["S"], b.components["S"])
        assert np.array_equal(a.components["S"][6:], c.components["S"])

    def test_seed_changes_paths(self):
        grid = TimeGrid.uniform(1.0, 10)
        a = simulate(GBM(1, 0.2), grid, seed=1, n_paths=2)
        b = simulate(GBM(1, 0.2), grid, seed=2, n_paths=2)
        assert not np.array_equal(a.components["S"], b.components["S"])

    @pytest.mark.parametrize("bad", [lambda: GBM(0.0, 0.2), lambda: GBM(-1.0, 0.2), lambda: GBM(1.0, -0.1),
                                     lambda: Heston(1.0, -0.1, 1, 0.04, 0.3, 0), lambda: Heston(1, 0.04, 1, 0.04, 0.3, 2),
                                     lambda: LocalVol(1.0, Smile(0.2), 0.0, 1.0),
                                     lambda: LocalVol(1.0, Smile(0.2), 0.5, 0.1)])
    def test_parameter_errors(self, bad):
        with pytest.raises(ValueError):
            bad()

    def test_local_vol_full_support(self):
        model = LocalVol(1.0, Smile(0.2), 0.1, 0.4)
        ps = simulate(model, TimeGrid.uniform(1.0, 32), seed=3, n_paths=100_000)
        sT = ps.components["S"][:, -1]
        # width 0.05 intervals within three total-vol deviations of the start
        for a in np.arange(np.exp(-0.6), np.exp(0.6) - 0.05, 0.1):
            assert np.mean((sT > a) & (sT < a + 0.05)) > 0

    def test_csv_export(self):
        ps = simulate(GBM(1.0, 0.2), TimeGrid.uniform(1.0, 3), seed=0, n_paths=1)
        lines = ps.to_csv().splitlines()
        assert lines[0] == "time,S"
        assert len(lines) == 5


class TestSerialization:
    @pytest.mark.parametrize("model", [GBM(1.0, 0.2), HESTON, SMILE, Absorbed(0.5, 0.8, 0.2), Bubble(1.0)])
    def test_round_trip(self, model):
        d = json.loads(json.dumps(model.to_dict()))
        back = model_from_dict(d)
        grid = TimeGrid.uniform(0.5, 8)
        assert np.array_equal(simulate(model, grid, 1, 3).components[model.labels[0]],
                              simulate(back, grid, 1, 3).components[model.labels[0]])

    def test_spliced_round_trip(self):
        sp = Spliced(GBM(1.0, 0.2), Always(), np.array([[2.0]]), CorridorExit(0, 0.5, 1.5))
        back = model_from_dict(json.loads(json.dumps(sp.to_dict())))
        grid = TimeGrid.uniform(1.0, 16)
        assert np.array_equal(splice(sp, grid, 4, 3).components["S"], splice(back, grid, 4, 3).components["S"])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            model_from_dict({"kind": "jump"})


class TestBubble:
    def test_endpoints(self):
        grid = TimeGrid.uniform(1.0, 64)
        y = bubble_path(1.0, grid, seed=0).values
        assert y[0] == 1.0
        assert y[-1] == 0.0
        assert np.all(y >= 0)

    def test_half_horizon_mean(self):
        grid = TimeGrid.uniform(0.5, 1)
        y = simulate(Bubble(1.0), grid, seed=7, n_paths=100_000).components["Y"][:, -1]
        se = y.std(ddof=1) / np.sqrt(y.size)
        assert abs(y.mean() - 1.0) < 3 * se

    def test_grid_beyond_horizon(self):
        with pytest.raises(ValueError):
            bubble_path(1.0, TimeGrid.uniform(2.0, 4), seed=0)


class TestConvexClaimMarket:
    def test_sigma0_and_bubble_weight(self):
        spec = ConvexClaimMarket(GBM(1.0, 0.3), Payoff.call(1.0), 0.0797, 1.0)
        ps = market_paths_convex(spec, TimeGrid.uniform(1.0, 32), seed=0, n_paths=2)
        assert ps.aux["sigma0"] == pytest.approx(0.2, abs=1e-3)
        assert ps.aux["bubble_weight"] == pytest.approx(0.0, abs=1e-6)

    def test_terminal_payoff_and_time_value(self):
        spec = ConvexClaimMarket(GBM(1.0, 0.2), Payoff.call(1.0), 0.1, 1.0)
        ps = market_paths_convex(spec, TimeGrid.uniform(1.0, 256), seed=3, n_paths=200)
        s, c = ps.components["S"], ps.components["C"]
        g = Payoff.call(1.0)
        assert np.max(np.abs(c[:, -1] - g(s[:, -1]))) <= 1e-12
        assert np.all(c[:, 1:-1] - g(s[:, 1:-1]) > 0)
        assert ps.aux["bubble_weight"] > 0

    def test_infeasible(self):
        with pytest.raises(InfeasibleMarket, match="c0 > g"):
            ConvexClaimMarket(GBM(1.0, 0.2), Payoff.call(0.75), 0.25, 1.0)

    def test_price_matches_black_scholes(self):
        spec = ConvexClaimMarket(GBM(1.0, 0.25), Payoff.neglog(), None, 1.0)
        ps = market_paths_convex(spec, TimeGrid.uniform(1.0, 4), seed=0, n_paths=1)
        assert ps.components["C"][0, 0] == pytest.approx(float(black_price(Payoff.neglog(), 1.0, 0.0625)))


class TestSplice:
    def test_immediate_trigger_is_brownian(self):
        grid = TimeGrid.uniform(2.0, 256)
        sp = Spliced(GBM(1.0, 0.2), Always(), np.eye(1), Never())
        ps = splice(sp, grid, seed=1, n_paths=2000)
        win = ps.aux["window"]
        assert np.all(win[:, 0] == 0)
        s = ps.components["S"]
        end = win[0, 1]
        assert grid.times[end] == pytest.approx(1.0)
        # arithmetic Brownian motion: increments are N(0, dt) independent of the level
        inc = np.diff(s[:, :end + 1], axis=1) / np.sqrt(grid.dt[:end])
        assert abs(inc.std() - 1.0) < 0.01
        assert abs(inc.mean()) < 0.01
        assert np.all(s[:, end:] == s[:, end:end + 1])

    def test_realized_qv_matches_cov(self):
        grid = TimeGrid.uniform(2.0, 2**15)
        sp = Spliced(GBM(1.0, 0.2), Always(), np.array([[4.0]]), Never())
        ps = splice(sp, grid, seed=2, n_paths=4)
        qv = quadratic_covariation(ps.path("S", 0), ps.path("S", 0)).values
        end = ps.aux["window"][0, 1]
        assert qv[end] == pytest.approx(4.0 * grid.times[end], rel=0.02)

    def test_unreachable_trigger(self):
        grid = TimeGrid.uniform(0.01, 64)
        sp = Spliced(GBM(1.0, 0.2), LevelSet(0, 2.0), np.eye(1), Never())
        ps = splice(sp, grid, seed=0, n_paths=200)
        assert not ps.aux["spliced"].any()
        base = simulate(GBM(1.0, 0.2), grid, seed=0, n_paths=200)
        assert np.array_equal(ps.components["S"], base.components["S"])

    def test_pre_trigger_segment_matches_base(self):
        grid = TimeGrid.uniform(1.0, 128)
        sp = Spliced(GBM(1.0, 0.3), LevelSet(0, 1.1), np.array([[0.5]]), Never(), FunctionalSpec.of_assets(["S"]))
        ps = splice(sp, grid, seed=3, n_paths=50)
        base = simulate(GBM(1.0, 0.3), grid, seed=3, n_paths=50).components["S"]
        for i, (k0, _) in enumerate(ps.aux["window"]):
            stop = len(grid) if k0 < 0 else k0 + 1
            assert np.array_equal(ps.components["S"][i, :stop], base[i, :stop])

    @pytest.mark.parametrize("cov", [[[1.0, 2.0], [2.0, 1.0]], [[-1.0]], [[1.0, 0.5], [0.4, 1.0]]])
    def test_bad_covariance(self, cov):
        base = ConvexClaimMarket(GBM(1.0, 0.2), Payoff.call(1.0), 0.1, 1.0) if len(cov) == 2 else GBM(1, 0.2)
        with pytest.raises(ValueError):
            Spliced(base, Always(), np.array(cov), Never())
