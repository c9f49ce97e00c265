"""
Tabular emission for experiments and simulation paths.

Experiment directory:
    changes.csv    variable,region,sector,partner,value   (cumulative changes)
    series.csv     variable,run,region,sector,partner,period,value
    summary.json   headline numbers and the options used
Simulation directory:
    path.csv       variable,region,sector,period,year,value
    shares.csv     period,source,dest,sector,value         (with grids=True)
    expenditure.csv period,region,sector,value              (with grids=True)
    path.json      per-period convergence records

Floats are written with 17 significant digits so a parse returns the same doubles;
`digits` rounds for display only.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from decouple_config import atomic_write_text, read_json
from decouple_dynamics import SimulationPath
from decouple_errors import IoFailure, UsageError
from decouple_scenario import CHANGE_COLUMNS, SERIES_COLUMNS, ComparisonReport

FULL_PRECISION = "%.17g"
PATH_COLUMNS = ["variable", "region", "sector", "period", "year", "value"]


def _csv(df: pd.DataFrame, digits: Optional[int] = None) -> str:
    fmt = FULL_PRECISION if digits is None else f"%.{int(digits)}f"
    return df.to_csv(index=False, float_format=fmt, lineterminator="\n")


def _read_csv(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise UsageError(f"Missing report table: {path}")
    try:
        df = pd.read_csv(path, keep_default_na=False, float_precision="round_trip")
    except Exception as e:
        raise IoFailure(f"Cannot parse {path}: {e}")
    for col in ("variable", "run", "region", "sector", "partner", "source", "dest"):
        if col in df.columns:
            df[col] = df[col].astype(str)
    return df


def emit_report(report: ComparisonReport, out_dir: Path, fmt: str = "both", digits: Optional[int] = None) -> List[Path]:
    """Write the report; fmt is csv, json or both."""
    if fmt not in ("csv", "json", "both"):
        raise UsageError(f"Unknown report format '{fmt}'")
    out_dir = Path(out_dir).expanduser()
    written = []
    if fmt in ("csv", "both"):
        written.append(atomic_write_text(out_dir / "changes.csv", _csv(report.changes[CHANGE_COLUMNS], digits)))
        written.append(atomic_write_text(out_dir / "series.csv", _csv(report.series[SERIES_COLUMNS], digits)))
    if fmt in ("json", "both"):
        meta = {"name": report.name, "regions": list(report.regions), "sectors": list(report.sectors),
                "start": report.start, "horizon": report.horizon, "blocs": report.blocs,
                "options": report.options, "tb_rate": report.tb_rate,
                "summary": report.summary()}
        written.append(atomic_write_text(out_dir / "summary.json", json.dumps(meta, indent=2, default=_plain) + "\n"))
    return written


def _plain(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


def load_report(out_dir: Path) -> ComparisonReport:
    out_dir = Path(out_dir).expanduser()
    meta = read_json(out_dir / "summary.json")
    changes = _read_csv(out_dir / "changes.csv")
    series = _read_csv(out_dir / "series.csv") if (out_dir / "series.csv").exists() else \
        pd.DataFrame(columns=SERIES_COLUMNS)
    return ComparisonReport(
        name=meta["name"], regions=tuple(meta["regions"]), sectors=tuple(meta["sectors"]), start=int(meta["start"]),
        horizon=int(meta["horizon"]), blocs=dict(meta["blocs"]), options=dict(meta["options"]),
        changes=changes[CHANGE_COLUMNS], series=series[SERIES_COLUMNS],
        tb_rate=dict(meta.get("tb_rate", {})),
    )


def path_frame(path: SimulationPath) -> pd.DataFrame:
    e = path.economy
    years = path.years
    rows: List[Dict[str, Any]] = []

    def add(variable: str, grid: np.ndarray, by_sector: bool = False):
        for d, region in enumerate(e.regions):
            for t in range(path.horizon):
                if by_sector:
                    for i, sector in enumerate(e.sectors):
                        rows.append({"variable": variable, "region": region, "sector": sector, "period": t,
                                     "year": years[t], "value": float(grid[d, i, t])})
                else:
                    rows.append({"variable": variable, "region": region, "sector": "", "period": t,
                                 "year": years[t], "value": float(grid[d, t])})

    add("real_income", path.real_income())
    add("gdp_per_capita", path.gdp_per_capita())
    add("income", path.series("income"))
    add("consumer_price", path.series("consumer_price"))
    add("wage", path.series("wages"))
    add("rent", path.series("rents"))
    add("capital", path.series("capital"))
    add("labor", path.series("labor"))
    add("lambda", path.lambda_path(), by_sector=True)
    add("expenditure", np.stack([s.expenditure for s in path.solutions], axis=-1), by_sector=True)
    return pd.DataFrame.from_records(rows, columns=PATH_COLUMNS)


def emit_path(path: SimulationPath, out_dir: Path, grids: bool = False, digits: Optional[int] = None) -> List[Path]:
    out_dir = Path(out_dir).expanduser()
    e = path.economy
    written = [atomic_write_text(out_dir / "path.csv", _csv(path_frame(path), digits))]
    records = [{"period": t, "year": path.years[t], "iterations": s.iterations, "residual": s.residual,
                "income": s.income.tolist(), "real_income": s.real_income.tolist()}
               for t, s in enumerate(path.solutions)]
    meta = {"economy": e.name, "label": path.label, "diffusion": path.diffusion, "regions": list(e.regions),
            "sectors": list(e.sectors), "periods": records}
    written.append(atomic_write_text(out_dir / "path.json", json.dumps(meta, indent=2) + "\n"))
    if grids:
        share_rows, spend_rows = [], []
        for t, sol in enumerate(path.solutions):
            for s, d, i in np.ndindex(sol.shares.shape):
                share_rows.append((t, e.regions[s], e.regions[d], e.sectors[i], float(sol.shares[s, d, i])))
            for d, i in np.ndindex(sol.expenditure.shape):
                spend_rows.append((t, e.regions[d], e.sectors[i], float(sol.expenditure[d, i])))
        written.append(atomic_write_text(out_dir / "shares.csv", _csv(
            pd.DataFrame(share_rows, columns=["period", "source", "dest", "sector", "value"]), digits)))
        written.append(atomic_write_text(out_dir / "expenditure.csv", _csv(
            pd.DataFrame(spend_rows, columns=["period", "region", "sector", "value"]), digits)))
    return written


def variable_table(source_dir: Path, variable: str, sector: Optional[str] = None) -> pd.DataFrame:
    """Wide table for one variable: regions × periods from a path, or the change rows of a report."""
    source_dir = Path(source_dir).expanduser()
    if (source_dir / "path.csv").exists():
        df = _read_csv(source_dir / "path.csv")
        df = df[df["variable"] == variable]
        if sector is not None:
            df = df[df["sector"] == sector]
        if df.empty:
            raise UsageError(f"Variable '{variable}' not found in {source_dir / 'path.csv'}")
        index = ["region", "sector"] if (df["sector"] != "").any() else ["region"]
        order = list(dict.fromkeys(df["region"]))
        wide = df.pivot_table(index=index, columns="period", values="value", aggfunc="first", sort=False)
        wide.columns = [f"t{c}" for c in wide.columns]
        wide = wide.reset_index()
        wide["region"] = pd.Categorical(wide["region"], categories=order, ordered=True)
        return wide.sort_values(index, kind="mergesort").reset_index(drop=True).astype({"region": str})
    if (source_dir / "changes.csv").exists():
        df = _read_csv(source_dir / "changes.csv")
        df = df[df["variable"] == variable]
        if df.empty:
            raise UsageError(f"Variable '{variable}' not found in {source_dir / 'changes.csv'}")
        return df.reset_index(drop=True)
    raise UsageError(f"{source_dir} holds neither path.csv nor changes.csv")


def write_table(df: pd.DataFrame, out: Optional[Path], digits: Optional[int] = None) -> str:
    text = _csv(df, digits)
    if out is not None:
        atomic_write_text(Path(out), text)
    return text
