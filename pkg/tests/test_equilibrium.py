import math
import unittest

import numpy as np

from decouple_economy import initial_state, load_flows
from decouple_equilibrium import (
    PolicyInputs,
    SolverOptions,
    base_policy,
    ces_price,
    ces_shares,
    consumer_demand,
    flows_from_solution,
    gamma1,
    investment_demand,
    landed_cost,
    price_index,
    profits,
    solve_static,
    trade_shares,
)
from decouple_errors import DivergentIndex, NegativeInvestment, NoConvergence, NonPositivePrice, SimulationError
from economies import DATA, FAST, bloc_economy, make_economy, toy_calibrated


def gamma1_reference(theta, sigma):
    a = (sigma - 1.0) / theta
    inner = (1.0 - a + a * (sigma / (sigma - 1.0)) ** (-theta)) * math.gamma((theta + 1.0 - sigma) / theta)
    return inner ** (1.0 / (1.0 - sigma))


class BuildingBlockTests(unittest.TestCase):
    def test_gamma1_matches_closed_form(self):
        for theta, sigma in ((4.0, 3.0), (10.09, 3.0), (2.8, 3.0), (6.0, 1.5)):
            self.assertAlmostEqual(float(gamma1(theta, sigma)), gamma1_reference(theta, sigma), places=12)

    def test_gamma1_diverges(self):
        with self.assertRaises(DivergentIndex):
            gamma1(np.array([4.0, 1.9]), np.array([3.0, 3.0]))

    def test_ces_limits(self):
        w = np.array([0.3, 0.7])
        p = np.array([2.0, 5.0])
        self.assertAlmostEqual(float(ces_price(w, p, 1.0)), 2.0 ** 0.3 * 5.0 ** 0.7, places=12)
        self.assertAlmostEqual(float(ces_price(w, p, 0.0)), 0.3 * 2.0 + 0.7 * 5.0, places=12)
        self.assertAlmostEqual(float(ces_price(w, p, 2.0)), (0.3 / 2.0 + 0.7 / 5.0) ** -1.0, places=12)
        self.assertAlmostEqual(float(ces_price(w, np.ones(2), 0.5)), 1.0, places=12)

    def test_ces_shares_sum_to_one(self):
        w = np.array([[0.2, 0.8], [0.5, 0.5]])
        p = np.array([[1.0, 3.0], [2.0, 0.5]])
        shares = ces_shares(w, p, np.array([0.5, 1.0]))
        np.testing.assert_allclose(shares.sum(axis=-1), 1.0)
        np.testing.assert_allclose(shares[1], [0.5, 0.5])

    def test_nonpositive_price_is_refused(self):
        with self.assertRaises(NonPositivePrice):
            ces_price([0.5, 0.5], [1.0, 0.0], 0.5)

    def test_landed_cost_broadcasts_unit_cost(self):
        c = np.array([[1.0], [2.0]])
        tau = np.array([[[1.0], [1.5]], [[1.2], [1.0]]])
        x = landed_cost(c, tau, np.ones_like(tau))
        self.assertAlmostEqual(x[0, 1, 0], 1.5)
        self.assertAlmostEqual(x[1, 0, 0], 2.4)

    def test_single_source_price_index(self):
        theta, sigma = 5.0, 3.0
        p = price_index(np.array([[2.0]]), np.array([[[1.3]]]), theta, sigma)
        expected = gamma1_reference(theta, sigma) * 2.0 ** (-1 / theta) * 1.3
        self.assertAlmostEqual(float(p[0, 0]), expected, places=12)

    def test_trade_shares_sum_to_one(self):
        rng = np.random.default_rng(7)
        lam = rng.uniform(0.1, 3.0, size=(3, 2))
        landed = rng.uniform(1.0, 2.0, size=(3, 3, 2))
        pi = trade_shares(lam, landed, np.array([4.0, 6.0]))
        np.testing.assert_allclose(pi.sum(axis=0), 1.0)

    def test_profits_are_sales_over_one_plus_theta(self):
        pi = np.array([[[0.7], [0.2]], [[0.3], [0.8]]])
        spend = np.array([[100.0], [50.0]])
        out = profits(pi, spend, np.array([4.0]))
        self.assertAlmostEqual(out[0, 0], (70.0 + 10.0) / 5.0)

    def test_consumer_price_uniform_two_sector(self):
        q, pc = consumer_demand(np.array([10.0]), np.array([0.2]), np.array([[0.5, 0.5]]), np.ones((1, 2)))
        self.assertAlmostEqual(float(pc[0]), 2.0)
        np.testing.assert_allclose(q, [[4.0, 4.0]])

    def test_investment_is_leontief(self):
        inv, q, p_in = investment_demand(np.array([100.0]), np.array([0.3]), np.array([0.1]),
                                         np.array([[0.25, 0.75]]), np.array([[2.0, 1.0]]))
        self.assertAlmostEqual(float(p_in[0]), 1.25)
        self.assertAlmostEqual(float(inv[0]), 20.0 / 1.25)
        np.testing.assert_allclose(q[0], [0.25 * 16.0, 0.75 * 16.0])

    def test_negative_investment_rate(self):
        with self.assertRaises(NegativeInvestment):
            investment_demand(np.array([1.0]), np.array([0.1]), np.array([0.2]), np.array([[1.0]]), np.array([[1.0]]))

    def test_policy_must_keep_domestic_cells_at_one(self):
        tau = np.full((2, 2, 1), 1.2)
        with self.assertRaises(SimulationError):
            PolicyInputs(tau=tau, tm=np.ones_like(tau))


class BertrandOracleTests(unittest.TestCase):
    """Monte Carlo check of the price index and trade shares under Bertrand pricing."""

    def test_price_index_and_shares_match_simulation(self):
        rng = np.random.default_rng(20240611)
        theta, sigma = 4.0, 2.0
        lam = np.array([1.0, 2.5])
        landed = np.array([1.0, 1.3])
        goods = 1_000_000
        markup = sigma / (sigma - 1.0)
        sources = len(lam)

        # Each source's two lowest costs: arrivals of a Poisson process with mean measure λ x^-θ c^θ.
        first = rng.exponential(size=(goods, sources))
        second = first + rng.exponential(size=(goods, sources))
        scale = (lam * landed ** (-theta))[None, :]
        c1 = (first / scale) ** (1.0 / theta)
        c2 = (second / scale) ** (1.0 / theta)
        costs = np.concatenate([c1, c2], axis=1)
        order = np.argsort(costs, axis=1)[:, :2]
        lowest = np.take_along_axis(costs, order[:, :1], axis=1)[:, 0]
        runner_up = np.take_along_axis(costs, order[:, 1:2], axis=1)[:, 0]
        price = np.minimum(runner_up, markup * lowest)

        draws = price ** (1.0 - sigma)
        model = price_index(lam[:, None], landed[:, None, None], theta, sigma)[0, 0]
        target = model ** (1.0 - sigma)
        se = draws.std(ddof=1) / math.sqrt(goods)
        self.assertLess(abs(draws.mean() - target), 3.0 * se)
        self.assertLess(abs(draws.mean() ** (1.0 / (1.0 - sigma)) / model - 1.0), 0.01)

        # Markup income over sales, with demand proportional to p^-σ.
        margin = (price - lowest) * price ** (-sigma) - draws / (1.0 + theta)
        self.assertLess(abs(margin.mean()), 3.0 * margin.std(ddof=1) / math.sqrt(goods))

        winner = order[:, 0] % sources
        pi = trade_shares(lam[:, None], landed[:, None, None], theta)[:, 0, 0]
        for s in range(sources):
            share = float(np.mean(winner == s))
            se = math.sqrt(pi[s] * (1.0 - pi[s]) / goods)
            self.assertLess(abs(share - pi[s]), 3.0 * se, f"source {s}")
            # Spending shares: Σ p^(1-σ) 1{s wins} / Σ p^(1-σ) against the same π.
            gap = draws * ((winner == s) - pi[s])
            self.assertLess(abs(gap.mean()), 3.0 * gap.std(ddof=1) / math.sqrt(goods), f"source {s}")


class StaticSolveTests(unittest.TestCase):
    def test_symmetric_regions_are_identical(self):
        economy = make_economy(sectors=("a", "b"), kappa=[0.4, 0.6])
        sol = solve_static(economy, initial_state(economy), opts=FAST)
        self.assertLessEqual(sol.residual, FAST.tol)
        self.assertAlmostEqual(sol.wages[0], sol.wages[1], places=9)
        np.testing.assert_allclose(sol.trade_balance, 0.0, atol=1e-9)
        np.testing.assert_allclose(sol.shares.sum(axis=0), 1.0)

    def test_markets_clear_and_income_adds_up(self):
        economy = bloc_economy(tb_rate=[0.05, 0.0, -0.03, 0.0], tm0=1.1)
        sol = solve_static(economy, initial_state(economy), opts=FAST)
        # World factor income equals the numeraire.
        self.assertAlmostEqual(float(sol.factor_income.sum()), economy.numeraire, places=6)
        # Sales equal producer-value purchases of each source's goods.
        np.testing.assert_allclose(sol.sales, sol.trade_values.sum(axis=1), rtol=1e-9)
        # Income is factor income plus tariff revenue plus profits.
        tariffs = (sol.shares * sol.expenditure[None] * (1.0 - 1.0 / sol.tariff_factors)).sum(axis=(0, 2))
        np.testing.assert_allclose(sol.transfers, tariffs, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(sol.income, sol.factor_income + sol.transfers + sol.profits.sum(axis=1), rtol=1e-12)
        # Trade balance: the first three regions at their rates, the last absorbs the rest.
        np.testing.assert_allclose(sol.trade_balance[:3], [0.05 * sol.income[0], 0.0, -0.03 * sol.income[2]],
                                   atol=1e-9)
        self.assertAlmostEqual(float(sol.trade_balance.sum()), 0.0, places=9)
        # Expenditure covers consumption, investment and intermediates.
        np.testing.assert_allclose(
            sol.expenditure, sol.consumption + sol.investment_spend + sol.intermediate_spend, rtol=1e-8)

    def test_goods_markets_clear_once_factor_markets_do(self):
        economy = bloc_economy(tb_rate=[0.05, 0.0, -0.03, 0.0], tm0=1.1)
        sol = solve_static(economy, initial_state(economy), opts=FAST)
        gap = sol.sales.sum(axis=1) + sol.transfers - sol.expenditure.sum(axis=1) - sol.trade_balance
        self.assertTrue(np.all(np.abs(gap) <= 10.0 * FAST.tol * sol.income), gap)

    def test_calibrated_flows_are_reproduced(self):
        economy = toy_calibrated()
        sol = solve_static(economy, initial_state(economy), opts=FAST)
        self.assertEqual(sol.iterations, 1)
        np.testing.assert_allclose(sol.prices, 1.0, atol=1e-10)
        np.testing.assert_allclose(sol.wages, 1.0, atol=1e-10)
        flows = flows_from_solution(economy, sol)
        original = load_flows(DATA / "toy_flows")
        for name in ("trade", "tariffs", "factors", "intermediates", "consumption", "investment"):
            np.testing.assert_allclose(getattr(flows, name), getattr(original, name), rtol=1e-8, atol=1e-8,
                                       err_msg=name)

    def test_numeraire_scales_nominal_values_only(self):
        economy = make_economy(sectors=("a", "b"), lambda0=[[1.0, 2.0], [2.0, 1.0]])
        doubled = economy.replace(numeraire=2.0 * economy.numeraire)
        a = solve_static(economy, initial_state(economy), opts=FAST)
        b = solve_static(doubled, initial_state(doubled), opts=FAST)
        np.testing.assert_allclose(b.income, 2.0 * a.income, rtol=1e-7)
        np.testing.assert_allclose(b.real_income, a.real_income, rtol=1e-7)
        np.testing.assert_allclose(b.shares, a.shares, atol=1e-9)

    def test_higher_trade_cost_lowers_trade(self):
        economy = make_economy()
        free = solve_static(economy, initial_state(economy), opts=FAST)
        tau = np.array(economy.tau0)
        tau[0, 1, 0] = tau[1, 0, 0] = 3.0
        pol = base_policy(economy).replace(tau=tau)
        costly = solve_static(economy, initial_state(economy), pol, FAST)
        self.assertLess(costly.shares[0, 1, 0], free.shares[0, 1, 0])
        self.assertLess(costly.real_income[0], free.real_income[0])

    def test_no_convergence_reports_worst_market(self):
        economy = bloc_economy()
        with self.assertRaises(NoConvergence) as ctx:
            solve_static(economy, initial_state(economy), opts=SolverOptions(tol=1e-14, max_iter=2))
        self.assertIn(ctx.exception.worst_cell["market"], ("labor", "capital"))
        self.assertEqual(ctx.exception.iterations, 2)


if __name__ == "__main__":
    unittest.main()
