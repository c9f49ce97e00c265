import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from decouple_economy import (
    PROHIBITIVE_COST,
    ModelParameters,
    StateVector,
    calibrate_shares,
    economy_from_dict,
    initial_state,
    load_economy,
    load_flows,
    observed_shares,
    save_economy,
    save_flows,
    validate_economy,
)
from decouple_errors import IoFailure, NonPositiveState, UnbalancedFlows, UnknownRegion, UsageError
from economies import DATA, economy_dict, make_economy


class EconomyValidationTests(unittest.TestCase):
    def test_toy_economy_is_valid(self):
        economy = load_economy(DATA / "toy_economy.json")
        self.assertEqual(validate_economy(economy), [])
        self.assertEqual(economy.n_regions, 10)
        self.assertEqual(economy.n_sectors, 6)
        self.assertEqual(economy.l_path.shape, (10, 20))

    def test_scalar_frictions_only_touch_cross_border_cells(self):
        economy = make_economy(regions=("a", "b", "c"), tau0=1.7, tm0=1.1)
        for d in range(3):
            self.assertEqual(economy.tau0[d, d, 0], 1.0)
            self.assertEqual(economy.tm0[d, d, 0], 1.0)
        self.assertEqual(economy.tau0[0, 2, 0], 1.7)
        self.assertAlmostEqual(economy.tm0[2, 1, 0], 1.1)

    def test_pair_complements_default(self):
        economy = make_economy(psi_f=0.3, psi_l=0.75)
        np.testing.assert_allclose(economy.psi_m, 0.7)
        np.testing.assert_allclose(economy.psi_k, 0.25)

    def test_numeraire_defaults_to_base_factor_income(self):
        economy = make_economy(l_path=[2.0, 3.0], k0=[10.0, 20.0], rent0=0.1)
        self.assertAlmostEqual(economy.numeraire, 2.0 + 3.0 + 0.1 * 30.0)

    def test_kappa_row_sum_is_reported(self):
        economy = make_economy(sectors=("a", "b"), kappa=[0.6, 0.6])
        fields = {v.field for v in validate_economy(economy)}
        self.assertIn("kappa", fields)

    def test_theta_not_above_sigma_minus_one_is_reported(self):
        economy = make_economy(theta=1.5, sigma=3.0)
        messages = [str(v) for v in validate_economy(economy) if v.field == "theta"]
        self.assertTrue(any("diverges" in m for m in messages))

    def test_domestic_friction_must_be_one(self):
        tau = np.full((2, 2, 1), 1.5)
        economy = make_economy(tau0=tau.tolist())
        violations = [v for v in validate_economy(economy) if v.field == "tau0"]
        self.assertEqual(len(violations), 2)
        self.assertEqual(violations[0].expected, "1")

    def test_investment_rate_must_be_nonnegative(self):
        economy = make_economy(savings_rate=0.1, tb_rate=[0.2, 0.0])
        self.assertIn("tb_rate", {v.field for v in validate_economy(economy)})

    def test_schema_rejects_unknown_fields(self):
        with self.assertRaises(IoFailure) as ctx:
            economy_from_dict(economy_dict(colour="blue"))
        self.assertTrue(any("colour" in c["error"] for c in ctx.exception.cells))

    def test_unknown_region_lookup(self):
        economy = make_economy()
        with self.assertRaises(UnknownRegion):
            economy.region_index("atlantis")

    def test_save_load_preserves_every_field(self):
        economy = load_economy(DATA / "toy_economy.json")
        with tempfile.TemporaryDirectory() as temp_dir:
            path = save_economy(economy, Path(temp_dir) / "economy.json")
            again = load_economy(path)
        for key, value in economy.to_dict().items():
            other = again.to_dict()[key]
            if isinstance(value, list):
                np.testing.assert_allclose(np.asarray(value), np.asarray(other), rtol=1e-12, err_msg=key)
            else:
                self.assertEqual(value, other, key)

    def test_missing_file_is_usage_error(self):
        with self.assertRaises(UsageError):
            load_economy(Path("/nonexistent/economy.json"))


class StateVectorTests(unittest.TestCase):
    def test_initial_state_matches_economy(self):
        economy = make_economy(l_path=[[1.0, 2.0, 3.0], [1.0, 1.0, 1.0]])
        state = initial_state(economy)
        np.testing.assert_array_equal(state.lam, economy.lambda0)
        np.testing.assert_array_equal(state.labor, [1.0, 1.0])
        self.assertEqual(state.period, 0)

    def test_nonpositive_capital_is_rejected(self):
        with self.assertRaises(NonPositiveState) as ctx:
            StateVector(lam=np.ones((2, 1)), capital=np.array([1.0, 0.0]), labor=np.ones(2), alpha=0.1, period=3)
        self.assertEqual(ctx.exception.cells[0]["field"], "capital")

    def test_negative_alpha_is_rejected(self):
        with self.assertRaises(NonPositiveState):
            StateVector(lam=np.ones((2, 1)), capital=np.ones(2), labor=np.ones(2), alpha=-0.1)


class BaselineFlowTests(unittest.TestCase):
    def setUp(self):
        self.flows = load_flows(DATA / "toy_flows")

    def test_toy_flows_are_balanced(self):
        self.assertEqual(self.flows.balance_violations(), [])
        np.testing.assert_allclose(self.flows.income, [166.5, 106.0])

    def test_profit_shares_match_theta_four(self):
        self.assertEqual(self.flows.profit_gaps(np.array([4.0, 4.0])), [])
        self.assertTrue(self.flows.profit_gaps(np.array([5.0, 5.0])))

    def test_unbalanced_flows_are_refused(self):
        trade = np.array(self.flows.trade)
        trade[0, 0, 0] += 5.0
        broken = self.flows.replace(trade=trade)
        with self.assertRaises(UnbalancedFlows) as ctx:
            calibrate_shares(broken, ModelParameters(theta=[4.0, 4.0]))
        identities = {c["identity"] for c in ctx.exception.cells}
        self.assertEqual(identities, {"supply", "demand"})

    def test_bad_value_reports_row(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            target = Path(temp_dir) / "flows"
            save_flows(self.flows, target)
            text = (target / "trade.csv").read_text(encoding="utf-8").splitlines()
            cols = text[2].split(",")
            text[2] = ",".join(cols[:-1] + ["-3"])
            (target / "trade.csv").write_text("\n".join(text) + "\n", encoding="utf-8")
            with self.assertRaises(IoFailure) as ctx:
                load_flows(target)
        self.assertEqual(ctx.exception.cells[0]["row"], 3)

    def test_save_and_reload_flows(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            save_flows(self.flows, Path(temp_dir))
            again = load_flows(Path(temp_dir))
            sets = json.loads((Path(temp_dir) / "sets.json").read_text(encoding="utf-8"))
        self.assertEqual(sets["regions"], ["home", "foreign"])
        np.testing.assert_array_equal(again.trade, self.flows.trade)
        np.testing.assert_array_equal(again.factors, self.flows.factors)


class ShareCalibrationTests(unittest.TestCase):
    def setUp(self):
        self.flows = load_flows(DATA / "toy_flows")
        self.economy = calibrate_shares(self.flows, ModelParameters(theta=[4.0, 4.0], horizon=3))

    def test_calibrated_economy_validates(self):
        self.assertEqual(validate_economy(self.economy), [])

    def test_share_parameters(self):
        e = self.economy
        np.testing.assert_allclose(e.kappa[0], [41.5 / 109.5, 68.0 / 109.5])
        np.testing.assert_allclose(e.chi[1], [20.0 / 30.0, 10.0 / 30.0])
        np.testing.assert_allclose(e.savings_rate, [1 - 109.5 / 166.5, 1 - 93.0 / 106.0])
        np.testing.assert_allclose(e.tb_rate, [17.0 / 166.5, -17.0 / 106.0])
        np.testing.assert_allclose(e.psi_f[0, 0], 60.0 / 80.0)
        np.testing.assert_allclose(e.psi_l[1, 1], 40.0 / 50.0)
        np.testing.assert_allclose(e.eta[0, 1], [5.0 / 15.0, 10.0 / 15.0])
        np.testing.assert_allclose(e.tm0[1, 0, 0], 1.1)
        np.testing.assert_allclose(e.k0, [35.0 / 0.15, 20.0 / 0.15])

    def test_iceberg_costs_follow_relative_shares(self):
        e = self.economy
        pi = observed_shares(self.flows)
        expected = (pi[1, 1, 0] / pi[1, 0, 0]) ** 0.25 / 1.1
        self.assertAlmostEqual(e.tau0[1, 0, 0], expected, places=12)
        self.assertTrue(np.all(e.tau0 >= 1.0))

    def test_zero_flow_is_prohibitive(self):
        trade = np.array(self.flows.trade)
        # Move home→foreign services into home's own market; the demand side follows.
        moved = trade[0, 1, 1]
        trade[0, 1, 1] = 0.0
        trade[0, 0, 1] += moved
        consumption = np.array(self.flows.consumption)
        consumption[0, 1] += moved
        consumption[1, 1] -= moved
        flows = self.flows.replace(trade=trade, consumption=consumption)
        economy = calibrate_shares(flows, ModelParameters(theta=[4.0, 4.0]))
        self.assertEqual(economy.tau0[0, 1, 1], PROHIBITIVE_COST)
        self.assertEqual(economy.tm0[0, 1, 1], 1.0)


if __name__ == "__main__":
    unittest.main()
