import unittest

import numpy as np
import pandas as pd

from decouple_calibration import (
    MomentSet,
    assign_blocs,
    balance_flows,
    balance_trade,
    best_of,
    beta_grid_search,
    beta_loss,
    calibrate_alpha0,
    fit_trade_costs,
    fps_index,
    growth_moments,
    lambda0_from_productivity,
    loss_table_from_moments,
    parse_grid,
    profit_rebalance,
    ras_balance,
    read_moment_table,
    similarity_matrix,
)
from decouple_dynamics import simulate
from decouple_economy import initial_state, load_flows
from decouple_equilibrium import solve_static
from decouple_errors import (
    CalibrationError,
    DegenerateMarginals,
    InfeasibleTarget,
    MissingCell,
    UnbalancedFlows,
    UsageError,
)
from decouple_scenario import load_presets
from economies import DATA, FAST, make_economy, toy_calibrated


class RasTests(unittest.TestCase):
    def test_meets_row_and_column_targets(self):
        base = np.array([[5.0, 2.0, 1.0], [1.0, 6.0, 2.0], [2.0, 1.0, 4.0]])
        rows, cols = np.array([10.0, 8.0, 6.0]), np.array([9.0, 9.0, 6.0])
        out = ras_balance(base, rows, cols)
        np.testing.assert_allclose(out.sum(axis=1), rows, rtol=1e-8)
        np.testing.assert_allclose(out.sum(axis=0), cols, rtol=1e-8)
        self.assertTrue(np.all(out > 0))

    def test_keeps_zeros_and_signs(self):
        base = np.array([[4.0, -1.0], [0.0, 3.0]])
        out = ras_balance(base, [2.0, 4.0], [3.0, 3.0])
        self.assertEqual(out[1, 0], 0.0)
        self.assertLess(out[0, 1], 0.0)
        np.testing.assert_allclose(out.sum(axis=1), [2.0, 4.0], rtol=1e-8)

    def test_mismatched_totals(self):
        with self.assertRaises(UnbalancedFlows):
            ras_balance(np.ones((2, 2)), [1.0, 1.0], [1.0, 2.0])

    def test_balance_trade_restores_totals(self):
        flows = load_flows(DATA / "toy_flows")
        noisy = flows.replace(trade=flows.trade * np.array([1.1, 0.9])[None, :, None])
        out = balance_trade(noisy, flows.trade.sum(axis=1), flows.trade.sum(axis=0))
        np.testing.assert_allclose(out.trade.sum(axis=1), flows.trade.sum(axis=1), rtol=1e-8)
        np.testing.assert_allclose(out.trade.sum(axis=0), flows.trade.sum(axis=0), rtol=1e-8)

    def test_balance_flows_repairs_a_perturbed_trade_block(self):
        flows = load_flows(DATA / "toy_flows")
        noisy = flows.replace(trade=flows.trade * np.array([[1.1, 0.95], [0.9, 1.05]])[:, :, None])
        self.assertNotEqual(noisy.balance_violations(), [])
        out = balance_flows(noisy)
        self.assertEqual(out.balance_violations(), [])
        np.testing.assert_array_equal(out.factors, flows.factors)
        np.testing.assert_array_equal(out.tariffs, flows.tariffs)

    def test_balance_flows_needs_matching_world_totals(self):
        flows = load_flows(DATA / "toy_flows")
        bigger = flows.replace(consumption=flows.consumption * 1.5)
        with self.assertRaises(UnbalancedFlows):
            balance_flows(bigger)


class ProfitRebalanceTests(unittest.TestCase):
    def setUp(self):
        self.flows = load_flows(DATA / "toy_flows")

    def test_profit_is_sales_over_one_plus_theta(self):
        out = profit_rebalance(self.flows, [4.0, 4.0])
        self.assertEqual(out.profit_gaps(np.array([4.0, 4.0])), [])
        np.testing.assert_allclose(out.factors, self.flows.factors, rtol=1e-8)
        self.assertEqual(out.balance_violations(), [])

    def test_labor_and_capital_are_refit_around_the_new_profit(self):
        out = profit_rebalance(self.flows, [9.0, 9.0])
        np.testing.assert_allclose(out.factors[:, :, 2], self.flows.sales / 10.0, rtol=1e-12)
        np.testing.assert_allclose(out.factors.sum(axis=2), self.flows.factors.sum(axis=2), rtol=1e-8)
        np.testing.assert_allclose(out.factors[:, :, 0].sum(axis=1), self.flows.factors[:, :, 0].sum(axis=1), rtol=1e-8)
        self.assertTrue(np.all(out.factors >= 0))
        self.assertEqual(out.balance_violations(), [])
        np.testing.assert_allclose(out.income, self.flows.income, rtol=1e-8)

    def test_infeasible(self):
        with self.assertRaises(InfeasibleTarget) as ctx:
            profit_rebalance(self.flows, [0.01, 0.01])
        self.assertEqual(len(ctx.exception.cells), 4)


class ProductivityTests(unittest.TestCase):
    def test_lambda0_has_unit_sector_means(self):
        lam = lambda0_from_productivity(DATA / "productivity.csv", ["home", "foreign"], ["goods", "services"])
        np.testing.assert_allclose(lam.mean(axis=0), 1.0)
        np.testing.assert_allclose(lam[:, 0], [1.3, 0.7])

    def test_missing_cell(self):
        df = pd.DataFrame({"region": ["home"], "sector": ["goods"], "value": [1.0]})
        with self.assertRaises(MissingCell):
            lambda0_from_productivity(df, ["home", "foreign"], ["goods"])

    def test_fit_trade_costs_reproduces_shares(self):
        economy = toy_calibrated()
        observed = solve_static(economy, initial_state(economy), opts=FAST).shares
        nudged = economy.replace(lambda0=economy.lambda0 * np.array([[1.02, 0.98], [0.98, 1.02]]))
        fitted = fit_trade_costs(nudged, observed, FAST)
        sol = solve_static(fitted, initial_state(fitted), opts=FAST)
        np.testing.assert_allclose(sol.shares, observed, atol=1e-7)
        np.testing.assert_array_equal(fitted.lambda0, nudged.lambda0)


class GrowthMomentTests(unittest.TestCase):
    def test_historical_series(self):
        moments = growth_moments(DATA / "historical_gdp.csv")
        self.assertEqual(len(moments.regions), 10)
        self.assertEqual(moments.periods, 16)
        self.assertAlmostEqual(moments.gdp_mean, 3.60, places=4)
        self.assertAlmostEqual(moments.gdp_sd, 2.66, places=4)
        self.assertAlmostEqual(moments.gdppc_mean, 2.70, places=4)
        self.assertAlmostEqual(moments.gdppc_sd, 2.51, places=4)

    def test_unknown_region(self):
        with self.assertRaises(MissingCell):
            growth_moments(DATA / "historical_gdp.csv", regions=["usa", "mars"])

    def test_loss_weights(self):
        hist = MomentSet(3.0, 2.0, 2.0, 1.0)
        sim = MomentSet(4.0, 2.0, 2.0, 3.0)
        self.assertAlmostEqual(beta_loss(sim, hist, 0.5), 2.5)
        self.assertAlmostEqual(beta_loss(sim, hist, 1.0), 4.0)
        self.assertAlmostEqual(beta_loss(sim, hist, 0.0), 1.0)
        with self.assertRaises(UsageError):
            beta_loss(sim, hist, 1.5)


class PublishedLossTableTests(unittest.TestCase):
    """Losses recomputed from the two-decimal published moments."""

    def setUp(self):
        self.hist, self.rows = read_moment_table(DATA / "published_growth_moments.csv")
        self.published = pd.read_csv(DATA / "published_loss_table.csv")

    def test_growth_spread_rises_with_beta(self):
        betas = sorted(self.rows)
        self.assertGreater(len(betas), 2)
        for column in ("gdp_sd", "gdppc_sd"):
            spread = [getattr(self.rows[b], column) for b in betas]
            self.assertTrue(all(a <= b for a, b in zip(spread, spread[1:])), column)

    def test_reproduces_published_losses(self):
        table = loss_table_from_moments(self.rows, self.hist).set_index("beta")
        for rec in self.published.to_dict("records"):
            sim = self.rows[round(rec["beta"], 4)]
            gaps = {
                "gdp": (sim.gdp_mean - self.hist.gdp_mean, sim.gdp_sd - self.hist.gdp_sd),
                "gdppc": (sim.gdppc_mean - self.hist.gdppc_mean, sim.gdppc_sd - self.hist.gdppc_sd),
            }
            # Each moment is rounded to 0.01, and so is each published loss.
            slack = {k: sum(2 * abs(d) * 0.01 + 0.0001 for d in v) + 0.005 for k, v in gaps.items()}
            slack["sum"] = slack["gdp"] + slack["gdppc"]
            for column in ("gdp", "gdppc", "sum"):
                self.assertLessEqual(abs(table.loc[round(rec["beta"], 4), column] - rec[column]), slack[column],
                                     f"beta={rec['beta']} {column}")

    def test_best_beta_by_weight(self):
        for w, expected in ((0.5, 0.44), (1.0, 0.45), (0.0, 0.44)):
            self.assertAlmostEqual(best_of(loss_table_from_moments(self.rows, self.hist, w)), expected, msg=f"w={w}")

    def test_eleven_grid_points(self):
        self.assertEqual(sorted(self.rows), parse_grid("0.40:0.50:0.01"))


class GridSearchTests(unittest.TestCase):
    def test_parse_grid(self):
        grid = parse_grid("0.40:0.50:0.01")
        self.assertEqual(len(grid), 11)
        self.assertIn(0.44, grid)
        self.assertEqual(parse_grid("0.2, 0.44"), [0.2, 0.44])
        with self.assertRaises(UsageError):
            parse_grid("0.5:0.4:0.01")

    def test_ties_go_to_the_smaller_beta(self):
        table = pd.DataFrame({"beta": [0.5, 0.4, 0.45], "loss": [1.0, 1.0, 2.0], "error": ["", "", ""]})
        self.assertEqual(best_of(table), 0.4)

    def test_every_point_failed(self):
        table = pd.DataFrame({"beta": [0.4], "loss": [np.nan], "error": ["boom"]})
        with self.assertRaises(CalibrationError):
            best_of(table)

    def test_recovers_the_generating_beta(self):
        economy = make_economy(sectors=("a", "b"), lambda0=[[1.0, 2.0], [0.3, 0.5]], horizon=4, alpha0=0.2)
        hist = growth_moments(simulate(economy.replace(beta=0.3), opts=FAST))
        result = beta_grid_search(economy, hist, [0.5, 0.3, 0.1], opts=FAST, workers=2)
        serial = beta_grid_search(economy, hist, [0.5, 0.3, 0.1], opts=FAST, workers=1)
        pd.testing.assert_frame_equal(serial.table, result.table)
        self.assertEqual(result.best_beta, 0.3)
        self.assertEqual(list(result.table["beta"]), [0.1, 0.3, 0.5])
        self.assertAlmostEqual(float(result.table.set_index("beta").loc[0.3, "loss"]), 0.0, places=12)
        self.assertEqual(result.to_dict()["best_beta"], 0.3)

    def test_calibrate_alpha0(self):
        economy = make_economy(lambda0=[1.0, 0.2], horizon=5)
        target = growth_moments(simulate(economy.replace(alpha0=0.1), opts=FAST)).gdp_mean
        self.assertAlmostEqual(calibrate_alpha0(economy, target, opts=FAST), 0.1, places=4)


class VotingSimilarityTests(unittest.TestCase):
    def test_fps_index(self):
        self.assertAlmostEqual(fps_index(np.diag([0.5, 0.5])), 1.0)
        p = np.array([0.3, 0.7])
        self.assertAlmostEqual(fps_index(np.outer(p, p)), 0.0)
        with self.assertRaises(DegenerateMarginals):
            fps_index(np.array([[1.0, 0.0], [0.0, 0.0]]))
        with self.assertRaises(UsageError):
            fps_index(np.ones((2, 2)))

    def test_fps_index_two_option_example(self):
        self.assertAlmostEqual(fps_index(np.array([[0.4, 0.1], [0.1, 0.4]])), 0.6)

    def test_fps_index_ignores_order_and_labels(self):
        rng = np.random.default_rng(17)
        for case in range(200):
            k = int(rng.integers(2, 5))
            P = rng.dirichlet(np.ones(k * k)).reshape(k, k)
            kappa = fps_index(P)
            self.assertAlmostEqual(fps_index(P.T), kappa, places=12, msg=case)
            perm = rng.permutation(k)
            self.assertAlmostEqual(fps_index(P[np.ix_(perm, perm)]), kappa, places=12, msg=case)

    def test_similarity_is_symmetric_with_unit_diagonal(self):
        sim = similarity_matrix(DATA / "votes.csv")
        self.assertEqual(sim.regions, tuple(sorted(sim.regions)))
        np.testing.assert_allclose(sim.values, sim.values.T)
        np.testing.assert_allclose(np.diag(sim.values), 1.0)

    def test_assign_blocs_recovers_the_preset_blocs(self):
        blocs, ranking = assign_blocs(similarity_matrix(DATA / "votes.csv"), "usa", "chn")
        self.assertEqual(blocs, load_presets()["blocs"])
        self.assertEqual(ranking.index[0], "usa")
        self.assertEqual(ranking.index[-1], "chn")

    def test_anchor_without_votes(self):
        with self.assertRaises(MissingCell):
            assign_blocs(similarity_matrix(DATA / "votes.csv"), "usa", "atlantis")


if __name__ == "__main__":
    unittest.main()
