import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from decouple_dynamics import simulate
from decouple_errors import UsageError
from decouple_report import emit_path, emit_report, load_report, path_frame, variable_table, write_table
from decouple_scenario import ExperimentOptions, PolicyShock, run_experiment
from economies import BLOCS, FAST, bloc_economy, make_economy


class ExperimentReportTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        shock = PolicyShock(kind="tariff", blocs=BLOCS, magnitude_pp=25.0, name="tariff25")
        cls.report = run_experiment(bloc_economy(horizon=3), shock,
                                    ExperimentOptions(solver=FAST, anchors=("w_rich", "e_one")))

    def test_round_trip_keeps_every_double(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            written = emit_report(self.report, Path(temp_dir))
            self.assertEqual(sorted(p.name for p in written), ["changes.csv", "series.csv", "summary.json"])
            loaded = load_report(Path(temp_dir))
        pd.testing.assert_frame_equal(loaded.changes, self.report.changes, check_dtype=False)
        self.assertEqual(loaded.blocs, BLOCS)
        self.assertEqual(loaded.start, 1)
        self.assertEqual(loaded.change("real_income", "e_two"), self.report.change("real_income", "e_two"))

    def test_summary_json(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            emit_report(self.report, Path(temp_dir), fmt="json")
            self.assertFalse((Path(temp_dir) / "changes.csv").exists())
            meta = json.loads((Path(temp_dir) / "summary.json").read_text(encoding="utf-8"))
        summary = meta["summary"]
        self.assertEqual(set(summary["real_income"]), set(BLOCS))
        self.assertIn("real_income_mean_East", summary)
        self.assertLess(summary["cross_bloc_trade_world"], 0.0)
        self.assertEqual(meta["options"]["shocks"][0]["kind"], "tariff")
        self.assertEqual(set(meta["tb_rate"]), set(BLOCS))
        self.assertEqual(summary["tb_rate"], meta["tb_rate"])

    def test_digits_round_for_display(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            emit_report(self.report, Path(temp_dir), fmt="csv", digits=3)
            lines = (Path(temp_dir) / "changes.csv").read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[0], "variable,region,sector,partner,value")
        self.assertTrue(all(len(line.rsplit(".", 1)[-1]) == 3 for line in lines[1:]))

    def test_change_table_from_directory(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            emit_report(self.report, Path(temp_dir))
            table = variable_table(Path(temp_dir), "lambda")
        self.assertEqual(len(table), 12)
        self.assertEqual(set(table["sector"]), {"A", "B", "C"})

    def test_unknown_format(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            with self.assertRaises(UsageError):
                emit_report(self.report, Path(temp_dir), fmt="xlsx")


class PathReportTests(unittest.TestCase):
    def setUp(self):
        self.economy = make_economy(sectors=("a", "b"), base_year=2020)
        self.path = simulate(self.economy, opts=FAST)

    def test_path_frame_layout(self):
        frame = path_frame(self.path)
        per_region = frame[frame["variable"] == "real_income"]
        self.assertEqual(len(per_region), 2 * 3)
        self.assertEqual(sorted(per_region["year"].unique()), [2020, 2021, 2022])
        self.assertEqual(len(frame[frame["variable"] == "lambda"]), 2 * 2 * 3)
        np.testing.assert_allclose(per_region["value"].to_numpy().reshape(2, 3), self.path.real_income())

    def test_emit_with_grids(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            written = emit_path(self.path, Path(temp_dir), grids=True)
            self.assertEqual(sorted(p.name for p in written),
                             ["expenditure.csv", "path.csv", "path.json", "shares.csv"])
            shares = pd.read_csv(Path(temp_dir) / "shares.csv")
            meta = json.loads((Path(temp_dir) / "path.json").read_text(encoding="utf-8"))
        self.assertEqual(len(shares), 3 * 2 * 2 * 2)
        totals = shares.groupby(["period", "dest", "sector"])["value"].sum()
        np.testing.assert_allclose(totals.to_numpy(), 1.0)
        self.assertEqual(len(meta["periods"]), 3)
        self.assertTrue(meta["diffusion"])

    def test_variable_table_is_wide(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            emit_path(self.path, Path(temp_dir))
            income = variable_table(Path(temp_dir), "real_income")
            lam = variable_table(Path(temp_dir), "lambda", sector="b")
            with self.assertRaises(UsageError):
                variable_table(Path(temp_dir), "happiness")
        self.assertEqual(list(income.columns), ["region", "t0", "t1", "t2"])
        self.assertEqual(list(income["region"]), ["home", "foreign"])
        np.testing.assert_allclose(income[["t0", "t1", "t2"]].to_numpy(), self.path.real_income())
        self.assertEqual(list(lam["sector"]), ["b", "b"])

    def test_empty_directory(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            with self.assertRaises(UsageError):
                variable_table(Path(temp_dir), "real_income")

    def test_write_table_digits(self):
        text = write_table(pd.DataFrame({"region": ["home"], "value": [1.23456]}), None, digits=2)
        self.assertEqual(text, "region,value\nhome,1.23\n")


if __name__ == "__main__":
    unittest.main()
