"""
Decoupling experiments.

A shock raises cross-bloc trade frictions by a number of percentage points, either on
the iceberg factor τ or on the gross tariff factor tm. An experiment runs the baseline
and the shocked path on the same economy and reports cumulative percentage changes

    x̂ = Σ_{t≥p} (x′_t − x_t) / Σ_{t≥p} x_t

for real income, trade with anchor partners, cross-bloc trade and λ.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from decouple_calibration import profit_rebalance
from decouple_config import REPO_DIR, read_json, validate_document
from decouple_devlog import log_event
from decouple_dynamics import SimulationPath, simulate
from decouple_economy import (
    BaselineFlows,
    Economy,
    ModelParameters,
    calibrate_shares,
    initial_state,
)
from decouple_equilibrium import PolicyInputs, SolverOptions, base_policy, flows_from_solution, solve_static
from decouple_errors import SimulationError, UnknownRegion, UsageError, ZeroBaseline
from decouple_session_logger import warn

PRESETS_PATH = REPO_DIR / "scenario_presets.json"
SHOCK_KINDS = ("iceberg", "tariff")
DEFAULT_ANCHORS = ("usa", "chn")


@dataclass(frozen=True)
class PolicyShock:
    kind: str
    blocs: Mapping[str, str]
    magnitude_pp: float
    sectors: Optional[Tuple[str, ...]] = None
    start: int = 1
    permanent: bool = True
    duration: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in SHOCK_KINDS:
            raise UsageError(f"Unknown shock kind '{self.kind}'; expected one of {SHOCK_KINDS}")
        if not self.magnitude_pp >= 0:
            raise UsageError(f"Shock magnitude must be nonnegative, got {self.magnitude_pp}")
        if self.start < 0:
            raise UsageError(f"Shock start period must be nonnegative, got {self.start}")
        object.__setattr__(self, "blocs", dict(self.blocs))
        if self.sectors is not None:
            object.__setattr__(self, "sectors", tuple(self.sectors))

    def active(self, t: int) -> bool:
        if t < self.start:
            return False
        if self.permanent:
            return True
        return t < self.start + (self.duration or 1)

    def apply(self, pol: PolicyInputs, t: int) -> PolicyInputs:
        return apply_shock(pol, self, t)

    def with_blocs(self, overrides: Optional[Mapping[str, str]]) -> "PolicyShock":
        if not overrides:
            return self
        return dataclasses.replace(self, blocs={**self.blocs, **overrides})

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_year: Optional[int] = None,
                  default_blocs: Optional[Mapping[str, str]] = None) -> "PolicyShock":
        validate_document(dict(data), "policy_shock", str(data.get("name", "<shock>")))
        start = int(data.get("start_period", 1))
        if "start_year" in data:
            if base_year is None:
                raise UsageError("start_year needs an economy base_year")
            start = int(data["start_year"]) - int(base_year)
        blocs = dict(default_blocs or {})
        blocs.update(data.get("blocs", {}))
        blocs.update(data.get("bloc_overrides", {}))
        sectors = data.get("sectors")
        return cls(kind=data["kind"], blocs=blocs, magnitude_pp=float(data["magnitude_pp"]),
                   sectors=None if sectors in (None, "all") else tuple(sectors), start=start,
                   permanent=bool(data.get("permanent", True)), duration=data.get("duration"),
                   name=str(data.get("name", "")))

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "kind": self.kind, "magnitude_pp": self.magnitude_pp, "blocs": dict(self.blocs),
                "sectors": list(self.sectors) if self.sectors else "all", "start_period": self.start,
                "permanent": self.permanent, "duration": self.duration}


def cross_bloc_mask(regions: Sequence[str], blocs: Mapping[str, str]) -> np.ndarray:
    unknown = sorted(set(blocs) - set(regions))
    unmapped = [r for r in regions if r not in blocs]
    if unknown or unmapped:
        cells = [{"region": r, "problem": "not in economy"} for r in unknown]
        cells += [{"region": r, "problem": "no bloc assigned"} for r in unmapped]
        raise UnknownRegion("Bloc map does not match the economy's regions", cells)
    labels = np.array([blocs[r] for r in regions])
    return labels[:, None] != labels[None, :]


def apply_shock(pol: PolicyInputs, shock: PolicyShock, t: int) -> PolicyInputs:
    """Add magnitude/100 to τ or tm on cross-bloc cells in scope once the shock is active."""
    mask = cross_bloc_mask(pol.regions, shock.blocs)
    if not shock.active(t) or shock.magnitude_pp == 0:
        return pol
    if shock.sectors is None:
        in_scope = np.ones(len(pol.sectors), dtype=bool)
    else:
        unknown = [s for s in shock.sectors if s not in pol.sectors]
        if unknown:
            raise UnknownRegion("Shock names unknown sector(s)", [{"sector": s} for s in unknown])
        in_scope = np.isin(pol.sectors, shock.sectors)
    cells = mask[:, :, None] & in_scope[None, None, :]
    add = shock.magnitude_pp / 100.0
    if shock.kind == "iceberg":
        return pol.replace(tau=np.where(cells, pol.tau + add, pol.tau))
    return pol.replace(tm=np.where(cells, pol.tm + add, pol.tm))


def cumulative_change(shocked: Any, baseline: Any, start: int = 0) -> Any:
    """Σ_{t≥start}(x′ − x) / Σ_{t≥start} x along the last axis."""
    x1 = np.asarray(shocked, dtype=float)
    x0 = np.asarray(baseline, dtype=float)
    if x1.shape != x0.shape:
        raise UsageError(f"Series shapes differ: {x1.shape} vs {x0.shape}")
    if not 0 <= start < x0.shape[-1]:
        raise UsageError(f"Start period {start} outside series of length {x0.shape[-1]}")
    den = x0[..., start:].sum(axis=-1)
    if np.any(den == 0):
        raise ZeroBaseline("Baseline series sums to zero", [{"cells": int(np.sum(den == 0))}])
    out = (x1[..., start:] - x0[..., start:]).sum(axis=-1) / den
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Presets and scenario files
# ---------------------------------------------------------------------------

def load_presets(path: Path = PRESETS_PATH) -> Dict[str, Any]:
    return read_json(path)


def list_presets(path: Path = PRESETS_PATH) -> List[Dict[str, Any]]:
    data = load_presets(path)
    return [{"name": name, **spec} for name, spec in data["presets"].items()]


@dataclass(frozen=True)
class Scenario:
    name: str
    shocks: Tuple[PolicyShock, ...]

    def apply(self, pol: PolicyInputs, t: int) -> PolicyInputs:
        for shock in self.shocks:
            pol = shock.apply(pol, t)
        return pol

    @property
    def blocs(self) -> Dict[str, str]:
        return dict(self.shocks[0].blocs) if self.shocks else {}

    def with_blocs(self, overrides: Optional[Mapping[str, str]]) -> "Scenario":
        return Scenario(self.name, tuple(s.with_blocs(overrides) for s in self.shocks))


def scenario_from_dict(data: Mapping[str, Any], base_year: Optional[int] = None,
                       default_blocs: Optional[Mapping[str, str]] = None) -> Scenario:
    name = str(data.get("name", "scenario"))
    raw = data.get("shocks", [data])
    # A file's own bloc map replaces the preset default rather than extending it.
    blocs = data.get("blocs") or default_blocs
    shocks = []
    for k, item in enumerate(raw):
        entry = dict(item)
        entry.setdefault("name", f"{name}[{k}]" if len(raw) > 1 else name)
        shocks.append(PolicyShock.from_dict(entry, base_year, blocs))
    return Scenario(name=name, shocks=tuple(shocks))


def load_scenario(ref: str, base_year: Optional[int] = None, presets_path: Path = PRESETS_PATH) -> Scenario:
    """A preset name or a path to a scenario JSON file."""
    presets = load_presets(presets_path)
    if ref in presets["presets"]:
        spec = dict(presets["presets"][ref])
        spec.setdefault("name", ref)
        return scenario_from_dict(spec, base_year, presets.get("blocs"))
    path = Path(ref).expanduser()
    if not path.exists():
        raise UsageError(f"Scenario not found: '{ref}' is neither a preset nor a file",
                         [{"presets": ",".join(presets["presets"])}])
    return scenario_from_dict(read_json(path), base_year, presets.get("blocs"))


# ---------------------------------------------------------------------------
# Single-sector collapse
# ---------------------------------------------------------------------------

def collapse_to_single_sector(e: Economy, opts: Optional[SolverOptions] = None) -> Economy:
    """
    One-sector version of `e`, recalibrated from the sector sums of its baseline flows.

    θ and the other sector elasticities become baseline world-expenditure-weighted means;
    profit is refitted to sales/(1+θ̄) before the shares are read off, so the collapsed
    economy reproduces the aggregate bilateral trade shares of the original at baseline.
    """
    if e.n_sectors == 1:
        return e
    sol = solve_static(e, initial_state(e), base_policy(e), opts)
    flows = flows_from_solution(e, sol)
    spend = sol.expenditure.sum(axis=0)
    omega = spend / spend.sum()
    theta_bar = float(omega @ e.theta)

    summed = BaselineFlows(
        regions=e.regions, sectors=("all",),
        trade=flows.trade.sum(axis=2, keepdims=True),
        tariffs=flows.tariffs.sum(axis=2, keepdims=True),
        factors=flows.factors.sum(axis=1, keepdims=True),
        intermediates=flows.intermediates.sum(axis=(1, 2))[:, None, None],
        consumption=flows.consumption.sum(axis=1, keepdims=True),
        investment=flows.investment.sum(axis=1, keepdims=True),
    )
    summed = profit_rebalance(summed, [theta_bar], shift=0.0)
    params = ModelParameters(
        theta=[theta_bar],
        sigma=[float(omega @ e.sigma)],
        nu=[float(omega @ e.nu)],
        rho=[float(omega @ e.rho)],
        mu=[float(omega @ e.mu)],
        beta=e.beta, alpha0=e.alpha0, alpha_growth=e.alpha_growth,
        delta=e.delta, rent0=e.rent0, horizon=e.horizon, base_year=e.base_year,
        labor_path=e.l_path,
        name=f"{e.name}-single-sector",
    )
    out = calibrate_shares(summed, params)
    # Share ratios of exactly one can land a rounding step below it.
    return out.replace(tau0=np.maximum(out.tau0, 1.0), tm0=np.maximum(out.tm0, 1.0))


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentOptions:
    diffusion: bool = True
    collapse: bool = False
    bloc_overrides: Optional[Mapping[str, str]] = None
    anchors: Tuple[str, ...] = DEFAULT_ANCHORS
    horizon: Optional[int] = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    workers: int = 2

    def to_dict(self) -> Dict[str, Any]:
        return {"diffusion": self.diffusion, "collapse": self.collapse,
                "bloc_overrides": dict(self.bloc_overrides or {}), "anchors": list(self.anchors),
                "horizon": self.horizon}


CHANGE_COLUMNS = ["variable", "region", "sector", "partner", "value"]
SERIES_COLUMNS = ["variable", "run", "region", "sector", "partner", "period", "value"]


@dataclass
class ComparisonReport:
    name: str
    regions: Tuple[str, ...]
    sectors: Tuple[str, ...]
    start: int
    horizon: int
    blocs: Dict[str, str]
    options: Dict[str, Any]
    changes: pd.DataFrame
    series: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=SERIES_COLUMNS))
    # Fixed trade-balance closure, reported alongside losses.
    tb_rate: Dict[str, float] = field(default_factory=dict)

    def change(self, variable: str, region: str, sector: str = "", partner: str = "") -> float:
        c = self.changes
        hit = c[(c["variable"] == variable) & (c["region"] == region) & (c["sector"] == sector)
                & (c["partner"] == partner)]
        if hit.empty:
            raise UnknownRegion(f"No '{variable}' change for {region}",
                                [{"variable": variable, "region": region, "sector": sector, "partner": partner}])
        return float(hit["value"].iloc[0])

    def variable(self, variable: str) -> pd.DataFrame:
        return self.changes[self.changes["variable"] == variable].reset_index(drop=True)

    def bloc_mean(self, variable: str, bloc: str) -> float:
        members = [r for r, b in self.blocs.items() if b == bloc]
        frame = self.variable(variable)
        return float(frame[frame["region"].isin(members)]["value"].mean())

    def summary(self) -> Dict[str, Any]:
        welfare = self.variable("real_income")
        out: Dict[str, Any] = {
            "name": self.name, "start": self.start, "horizon": self.horizon, "blocs": self.blocs,
            "options": self.options,
            "real_income": dict(zip(welfare["region"], welfare["value"].astype(float))),
        }
        for bloc in sorted(set(self.blocs.values())):
            out[f"real_income_mean_{bloc}"] = self.bloc_mean("real_income", bloc)
        world = self.changes[(self.changes["variable"] == "cross_bloc_trade") & (self.changes["region"] == "world")]
        if not world.empty:
            out["cross_bloc_trade_world"] = float(world["value"].iloc[0])
        if self.tb_rate:
            out["tb_rate"] = dict(self.tb_rate)
        return out


def _rows(variable: str, region: str, values: Any, sector: str = "", partner: str = "") -> Dict[str, Any]:
    return {"variable": variable, "region": region, "sector": sector, "partner": partner, "value": float(values)}


def build_report(name: str, base: SimulationPath, shocked: SimulationPath, blocs: Mapping[str, str],
                 start: int, anchors: Sequence[str] = DEFAULT_ANCHORS,
                 options: Optional[Dict[str, Any]] = None) -> ComparisonReport:
    e = base.economy
    regions, sectors = e.regions, e.sectors
    changes: List[Dict[str, Any]] = []
    series: List[Dict[str, Any]] = []

    def add_series(variable: str, run: str, region: str, values: np.ndarray, sector: str = "", partner: str = ""):
        for t, v in enumerate(values):
            series.append({"variable": variable, "run": run, "region": region, "sector": sector,
                           "partner": partner, "period": t, "value": float(v)})

    inc0, inc1 = base.real_income(), shocked.real_income()
    welfare = cumulative_change(inc1, inc0, start)
    for d, region in enumerate(regions):
        changes.append(_rows("real_income", region, welfare[d]))
        add_series("real_income", "baseline", region, inc0[d])
        add_series("real_income", "shock", region, inc1[d])

    flows0, flows1 = base.bilateral_trade(), shocked.bilateral_trade()
    live_anchors = [a for a in anchors if a in regions]
    for a in anchors:
        if a not in regions:
            warn(f"Anchor region '{a}' not in economy; trade-with-anchor rows skipped")
    for a in live_anchors:
        k = regions.index(a)
        for d, region in enumerate(regions):
            if d == k:
                continue
            x0 = flows0[d, k] + flows0[k, d]
            x1 = flows1[d, k] + flows1[k, d]
            if x0[start:].sum() > 0:
                changes.append(_rows("trade", region, cumulative_change(x1, x0, start), partner=a))

    cross0, cross1 = base.bloc_trade(blocs), shocked.bloc_trade(blocs)
    for key in list(regions) + ["world"]:
        if cross0[key][start:].sum() > 0:
            changes.append(_rows("cross_bloc_trade", key, cumulative_change(cross1[key], cross0[key], start)))
            add_series("cross_bloc_trade", "baseline", key, cross0[key])
            add_series("cross_bloc_trade", "shock", key, cross1[key])

    lam0, lam1 = base.lambda_path(), shocked.lambda_path()
    for d, region in enumerate(regions):
        for i, sector in enumerate(sectors):
            if lam0[d, i, start:].sum() > 0:
                changes.append(_rows("lambda", region, cumulative_change(lam1[d, i], lam0[d, i], start), sector=sector))
                add_series("lambda", "baseline", region, lam0[d, i], sector=sector)
                add_series("lambda", "shock", region, lam1[d, i], sector=sector)

    return ComparisonReport(
        name=name, regions=regions, sectors=sectors, start=start, horizon=base.horizon, blocs=dict(blocs),
        options=dict(options or {}),
        changes=pd.DataFrame.from_records(changes, columns=CHANGE_COLUMNS),
        series=pd.DataFrame.from_records(series, columns=SERIES_COLUMNS),
        tb_rate=dict(zip(regions, (float(v) for v in e.tb_rate))),
    )


def run_experiment(e: Economy, shock: Any, options: Optional[ExperimentOptions] = None) -> ComparisonReport:
    """Baseline and shocked paths on one economy; both run concurrently."""
    options = options or ExperimentOptions()
    scenario = shock if isinstance(shock, Scenario) else Scenario(getattr(shock, "name", "") or "shock", (shock,))
    scenario = scenario.with_blocs(options.bloc_overrides)
    if not scenario.shocks:
        raise UsageError("Scenario has no shocks")
    horizon = int(options.horizon or e.horizon)
    start = min(s.start for s in scenario.shocks)
    if start >= horizon:
        raise UsageError(f"Shock starts in period {start}, after the last period {horizon - 1}")
    for s in scenario.shocks:
        cross_bloc_mask(e.regions, s.blocs)

    econ = e if options.diffusion else e.replace(alpha0=0.0)
    devlog = options.solver.devlog
    if options.collapse:
        log_event(devlog, "experiment_stage", {"scenario": scenario.name, "stage": "collapse"})
        econ = collapse_to_single_sector(econ, options.solver)

    def run(label: str, shocks: Any) -> SimulationPath:
        log_event(devlog, "experiment_stage", {"scenario": scenario.name, "stage": label})
        try:
            return simulate(econ, shocks, horizon=horizon, opts=options.solver, label=label)
        except SimulationError as exc:
            exc.cells.append({"scenario": scenario.name, "run": label})
            raise

    with ThreadPoolExecutor(max_workers=max(1, min(2, options.workers))) as pool:
        base_future = pool.submit(run, "baseline", None)
        shock_future = pool.submit(run, "shock", scenario)
        base, shocked = base_future.result(), shock_future.result()
    log_event(devlog, "experiment_stage", {"scenario": scenario.name, "stage": "report"})
    return build_report(scenario.name, base, shocked, scenario.blocs, start, options.anchors,
                        {**options.to_dict(), "shocks": [s.to_dict() for s in scenario.shocks]})
