"""
Calibration helpers: productivity-based λ₀, baseline data adjustment, growth-moment
matching for β (and the α₀ scale), and bloc assignment from UN voting similarity.

Growth rates are compound annual rates in percent; cross-region standard deviations
use ddof=1.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from decouple_devlog import log_event
from decouple_economy import BALANCE_TOL, PROHIBITIVE_COST, BaselineFlows, Economy, initial_state
from decouple_equilibrium import SolverOptions, base_policy, solve_static
from decouple_errors import (
    CalibrationError,
    DegenerateMarginals,
    InfeasibleTarget,
    IoFailure,
    MissingCell,
    SimulationError,
    UnbalancedFlows,
    UsageError,
)
from decouple_session_logger import warn

TableSource = Union[Path, str, pd.DataFrame]


def _frame(source: TableSource, required: Sequence[str], what: str) -> pd.DataFrame:
    if isinstance(source, pd.DataFrame):
        df = source.copy()
    else:
        path = Path(source).expanduser()
        if not path.exists():
            raise UsageError(f"{what} file not found: {path}")
        try:
            df = pd.read_csv(path, dtype={"region": str, "sector": str}, encoding="utf-8")
        except Exception as e:
            raise IoFailure(f"Cannot parse {path}: {e}")
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise IoFailure(f"{what} table lacks column(s) {missing}")
    return df


# ---------------------------------------------------------------------------
# Productivity and trade costs
# ---------------------------------------------------------------------------

def lambda0_from_productivity(source: TableSource, regions: Sequence[str], sectors: Sequence[str]) -> np.ndarray:
    """λ₀ proportional to labor productivity, scaled so each sector's cross-region mean is 1."""
    df = _frame(source, ("region", "sector", "value"), "Productivity")
    values = pd.to_numeric(df["value"], errors="coerce")
    bad = values.isna() | (values <= 0)
    if bad.any():
        raise IoFailure("Productivity values must be positive",
                        [{"row": int(r) + 2, "region": df.loc[r, "region"], "value": str(df.loc[r, "value"])}
                         for r in df.index[bad]])
    lookup = {(r, s): v for r, s, v in zip(df["region"], df["sector"], values)}
    missing = [{"region": r, "sector": s} for r in regions for s in sectors if (r, s) not in lookup]
    if missing:
        raise MissingCell(f"Productivity table lacks {len(missing)} region/sector cell(s)", missing)
    grid = np.array([[lookup[(r, s)] for s in sectors] for r in regions], dtype=float)
    return grid / grid.mean(axis=0, keepdims=True)


def fit_trade_costs(e: Economy, observed: np.ndarray, opts: Optional[SolverOptions] = None,
                    tol: float = 1e-9, max_iter: int = 500) -> Economy:
    """
    Iterate cross-border τ₀ until the baseline equilibrium reproduces the observed shares
    for the economy's (prescribed) λ₀.
    """
    observed = np.asarray(observed, dtype=float)
    n = e.n_regions
    diag = np.arange(n)
    live = observed > 0
    tau = np.where(live, e.tau0, PROHIBITIVE_COST)
    tau[diag, diag, :] = 1.0
    gap = np.inf
    for it in range(1, max_iter + 1):
        trial = e.replace(tau0=tau)
        sol = solve_static(trial, initial_state(trial), base_policy(trial), opts)
        pi = sol.shares
        gap = float(np.abs(pi - observed).max())
        if gap < tol:
            return trial
        model_rel = pi / pi[diag, diag, :][None, :, :]
        obs_rel = np.where(live, observed, 1.0) / np.where(observed[diag, diag, :] > 0, observed[diag, diag, :], 1.0)
        ratio = np.where(live & (pi > 0), model_rel / obs_rel, 1.0)
        tau = tau * ratio ** (1.0 / e.theta[None, None, :])
        tau[diag, diag, :] = 1.0
        below = np.argwhere(tau < 1.0)
        if below.size:
            cells = [{"source": e.regions[s], "dest": e.regions[d], "sector": e.sectors[i], "tau": float(tau[s, d, i])}
                     for s, d, i in below]
            raise CalibrationError("Prescribed productivity requires iceberg costs below 1", cells)
    raise CalibrationError(f"Trade costs did not fit observed shares after {max_iter} iterations",
                           [{"max_share_gap": gap}])


# ---------------------------------------------------------------------------
# Baseline data adjustment
# ---------------------------------------------------------------------------

def _invd(x: np.ndarray) -> np.ndarray:
    out = np.ones_like(x, dtype=float)
    np.divide(1.0, x, out=out, where=x != 0)
    return out


def ras_balance(base: Any, row_totals: Any, col_totals: Any, tol: float = 1e-10,
                max_iter: int = 10000) -> np.ndarray:
    """
    GRAS: scale `base` to the given row and column totals, keeping it as close as possible
    to the original. Negative entries are allowed.
    """
    X0 = np.asarray(base, dtype=float)
    u = np.asarray(row_totals, dtype=float)
    v = np.asarray(col_totals, dtype=float)
    if not math.isclose(u.sum(), v.sum(), rel_tol=1e-9, abs_tol=1e-12):
        raise UnbalancedFlows("Row and column targets have different totals",
                              [{"rows": float(u.sum()), "columns": float(v.sum())}])
    N = np.where(X0 < 0, -X0, 0.0)
    P = X0 + N

    def step(Pm: np.ndarray, Nm: np.ndarray, other: np.ndarray, target: np.ndarray) -> np.ndarray:
        pos = Pm @ other
        neg = Nm @ _invd(other)
        out = (target + np.sqrt(target ** 2 + 4.0 * pos * neg)) * _invd(2.0 * pos)
        fallback = -neg * _invd(target)
        return np.where(pos == 0, fallback, out)

    r = np.ones(X0.shape[0])
    s = step(P.T, N.T, r, v)
    for _ in range(max_iter):
        r = step(P, N, s, u)
        s_new = step(P.T, N.T, r, v)
        if np.max(np.abs(s_new - s)) <= tol:
            s = s_new
            break
        s = s_new
    else:
        raise CalibrationError("RAS balancing did not converge", [{"iterations": max_iter}])
    r = step(P, N, s, u)
    return (r[:, None] * P * s[None, :]) - (_invd(r)[:, None] * N * _invd(s)[None, :])


def balance_trade(flows: BaselineFlows, supply: np.ndarray, demand: np.ndarray) -> BaselineFlows:
    """RAS each sector's bilateral trade to supply totals (rows) and producer-value demand (columns)."""
    trade = np.array(flows.trade)
    for i in range(trade.shape[2]):
        trade[:, :, i] = ras_balance(trade[:, :, i], supply[:, i], demand[:, i])
    return flows.replace(trade=trade)


def balance_flows(flows: BaselineFlows) -> BaselineFlows:
    """
    Bring bilateral trade in line with the rest of the table: each source's sales to
    its supply cost and each destination's producer-value purchases to its uses net of
    tariffs. Only the trade block moves.
    """
    supply = flows.supply_cost
    demand = flows.uses - flows.tariffs.sum(axis=0)
    gap = np.abs(supply.sum(axis=0) - demand.sum(axis=0))
    off = gap > BALANCE_TOL * np.maximum(np.abs(supply.sum(axis=0)), 1e-300)
    if np.any(off):
        cells = [{"sector": flows.sectors[i], "supply": float(supply[:, i].sum()),
                  "demand": float(demand[:, i].sum())} for i in np.nonzero(off)[0]]
        raise UnbalancedFlows("World supply and demand differ; trade alone cannot be balanced", cells)
    ratio = np.divide(supply.sum(axis=0), demand.sum(axis=0), out=np.ones(supply.shape[1]),
                      where=demand.sum(axis=0) > 0)
    out = balance_trade(flows, supply, demand * ratio[None, :])
    out.check_balanced()
    return out


def profit_rebalance(flows: BaselineFlows, theta: Sequence[float], shift: float = 0.5) -> BaselineFlows:
    """
    Step 1 moves `shift` of capital payments to profit. Step 2 sets profit to sales/(1+θ)
    and refits each region's labor and capital by RAS so that every cell keeps its value
    added and the region keeps its labor income. Balance identities are unchanged.
    """
    flows.check_balanced()
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (len(flows.sectors),))
    factors = np.array(flows.factors)
    moved = shift * factors[:, :, 1]
    factors[:, :, 1] -= moved
    factors[:, :, 2] += moved

    target = flows.sales / (1.0 + theta)[None, :]
    pool = factors[:, :, 1] + factors[:, :, 2]
    short = target > pool * (1.0 + 1e-12)
    if np.any(short):
        cells = [{"region": flows.regions[d], "sector": flows.sectors[i], "required_profit": float(target[d, i]),
                  "capital_plus_profit": float(pool[d, i])} for d, i in np.argwhere(short)]
        raise InfeasibleTarget("Capital income is smaller than the profit income required", cells)

    residual = np.maximum(pool - target, 0.0)
    for d in range(len(flows.regions)):
        labor = factors[d, :, 0]
        capital = np.where(factors[d, :, 1] > 0, factors[d, :, 1], residual[d])
        rows = labor + residual[d]
        cols = [labor.sum(), rows.sum() - labor.sum()]
        fitted = ras_balance(np.stack([labor, capital], axis=1), rows, cols)
        factors[d, :, :2] = fitted
    factors[:, :, 2] = target
    out = flows.replace(factors=factors)
    out.check_balanced()
    return out


# ---------------------------------------------------------------------------
# Growth moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MomentSet:
    gdp_mean: float
    gdp_sd: float
    gdppc_mean: float
    gdppc_sd: float
    regions: Tuple[str, ...] = ()
    periods: int = 0
    gdp_max: float = float("nan")
    gdp_min: float = float("nan")
    gdppc_max: float = float("nan")
    gdppc_min: float = float("nan")
    label: str = ""

    def as_dict(self) -> Dict[str, Any]:
        return {"label": self.label, "gdp_mean": self.gdp_mean, "gdp_sd": self.gdp_sd, "gdp_max": self.gdp_max,
                "gdp_min": self.gdp_min, "gdppc_mean": self.gdppc_mean, "gdppc_sd": self.gdppc_sd,
                "gdppc_max": self.gdppc_max, "gdppc_min": self.gdppc_min, "periods": self.periods}


def annual_growth(series: np.ndarray) -> np.ndarray:
    """Compound annual growth in percent along the last axis."""
    series = np.asarray(series, dtype=float)
    periods = series.shape[-1]
    if periods < 2:
        raise UsageError("Growth rates need at least two periods")
    return 100.0 * ((series[..., -1] / series[..., 0]) ** (1.0 / (periods - 1)) - 1.0)


def _spread(rates: np.ndarray) -> float:
    return float(np.std(rates, ddof=1)) if rates.size > 1 else 0.0


def moments_from_series(gdp: np.ndarray, gdp_per_capita: np.ndarray, regions: Sequence[str] = (),
                        label: str = "") -> MomentSet:
    g = annual_growth(gdp)
    gpc = annual_growth(gdp_per_capita)
    return MomentSet(gdp_mean=float(g.mean()), gdp_sd=_spread(g), gdppc_mean=float(gpc.mean()), gdppc_sd=_spread(gpc),
                     regions=tuple(regions), periods=int(np.shape(gdp)[-1]), gdp_max=float(g.max()),
                     gdp_min=float(g.min()), gdppc_max=float(gpc.max()), gdppc_min=float(gpc.min()), label=label)


def growth_moments(source: Any, regions: Optional[Sequence[str]] = None) -> MomentSet:
    """Moments from a SimulationPath or a historical table (region, year, gdp, population)."""
    if hasattr(source, "real_income"):
        return moments_from_series(source.gdp(), source.gdp_per_capita(), source.economy.regions,
                                   label=getattr(source, "label", "simulated"))
    df = _frame(source, ("region", "year", "gdp", "population"), "Historical GDP")
    for col in ("gdp", "population"):
        values = pd.to_numeric(df[col], errors="coerce")
        bad = values.isna() | (values <= 0)
        if bad.any():
            raise IoFailure(f"Historical {col} must be positive",
                            [{"row": int(r) + 2, "column": col, "value": str(df.loc[r, col])} for r in df.index[bad]])
        df[col] = values
    if regions is not None:
        unknown = sorted(set(regions) - set(df["region"]))
        if unknown:
            raise MissingCell("Historical series lacks regions", [{"region": r} for r in unknown])
        df = df[df["region"].isin(regions)]
    gdp = df.pivot(index="region", columns="year", values="gdp").sort_index(axis=1)
    pop = df.pivot(index="region", columns="year", values="population").sort_index(axis=1)
    if regions is not None:
        gdp, pop = gdp.loc[list(regions)], pop.loc[list(regions)]
    if gdp.isna().any().any():
        holes = [{"region": r, "year": int(y)} for r, y in zip(*np.nonzero(gdp.isna().to_numpy()))]
        raise MissingCell("Historical series has gaps", holes)
    return moments_from_series(gdp.to_numpy(), (gdp / pop).to_numpy(), tuple(gdp.index), label="historical")


def loss_components(sim: MomentSet, hist: MomentSet) -> Tuple[float, float]:
    """Squared mean and sd gaps: (GDP, GDP per capita)."""
    gdp = (sim.gdp_mean - hist.gdp_mean) ** 2 + (sim.gdp_sd - hist.gdp_sd) ** 2
    gdppc = (sim.gdppc_mean - hist.gdppc_mean) ** 2 + (sim.gdppc_sd - hist.gdppc_sd) ** 2
    return gdp, gdppc


def beta_loss(sim: MomentSet, hist: MomentSet, w: float = 0.5) -> float:
    """w on the GDP-per-capita terms, 1 − w on the GDP terms."""
    if not 0.0 <= w <= 1.0:
        raise UsageError(f"Loss weight must lie in [0, 1], got {w}")
    gdp, gdppc = loss_components(sim, hist)
    return w * gdppc + (1.0 - w) * gdp


def read_moment_table(source: TableSource) -> Tuple[MomentSet, Dict[float, MomentSet]]:
    """Historical row plus simulated rows keyed by β from a published moment table."""
    df = _frame(source, ("label", "beta", "gdp_mean", "gdp_sd", "gdppc_mean", "gdppc_sd"), "Moment")
    hist: Optional[MomentSet] = None
    rows: Dict[float, MomentSet] = {}
    for rec in df.to_dict("records"):
        ms = MomentSet(**{k: float(rec[k]) for k in ("gdp_mean", "gdp_sd", "gdppc_mean", "gdppc_sd")},
                       **{k: float(rec[k]) for k in ("gdp_max", "gdp_min", "gdppc_max", "gdppc_min") if k in rec},
                       label=str(rec["label"]))
        if str(rec["label"]) == "historical":
            hist = ms
        else:
            rows[round(float(rec["beta"]), 4)] = ms
    if hist is None:
        raise IoFailure("Moment table has no 'historical' row")
    return hist, rows


def loss_table_from_moments(rows: Mapping[float, MomentSet], hist: MomentSet, w: float = 0.5) -> pd.DataFrame:
    records = []
    for beta in sorted(rows):
        gdp, gdppc = loss_components(rows[beta], hist)
        records.append({"beta": beta, "gdp": gdp, "gdppc": gdppc, "sum": gdp + gdppc,
                        "loss": beta_loss(rows[beta], hist, w), "status": "ok", "error": ""})
    return pd.DataFrame.from_records(records, columns=["beta", "gdp", "gdppc", "sum", "loss", "status", "error"])


@dataclass
class BetaSearchResult:
    best_beta: float
    table: pd.DataFrame
    weight: float
    historical: Optional[MomentSet] = None
    moments: Dict[float, MomentSet] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"best_beta": self.best_beta, "weight": self.weight,
                "table": self.table.replace({np.nan: None}).to_dict("records")}


def best_of(table: pd.DataFrame) -> float:
    ok = table[np.isfinite(table["loss"].astype(float))]
    if ok.empty:
        raise CalibrationError("Every grid point failed",
                               [{"beta": b, "error": err} for b, err in zip(table["beta"], table["error"])])
    ordered = ok.sort_values("beta", kind="mergesort")
    return float(ordered.loc[ordered["loss"].astype(float).idxmin(), "beta"])


def parse_grid(text: str) -> List[float]:
    """'0.40:0.50:0.01' or '0.2,0.44,0.5'."""
    try:
        if ":" in text:
            lo, hi, step = (float(x) for x in text.split(":"))
            if step <= 0 or hi < lo:
                raise ValueError
            count = int(round((hi - lo) / step)) + 1
            return [round(lo + k * step, 10) for k in range(count)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"Bad grid specification {text!r}; use lo:hi:step or a comma list")


def _grid_point(e: Economy, beta: float, hist: MomentSet, w: float, horizon: int,
                opts: Optional[SolverOptions]) -> Tuple[Dict[str, Any], Optional[MomentSet]]:
    from decouple_dynamics import simulate

    try:
        path = simulate(e.replace(beta=beta), horizon=horizon, opts=opts, label=f"beta={beta:g}")
        sim = growth_moments(path)
    except SimulationError as exc:
        return {"beta": beta, "gdp": np.nan, "gdppc": np.nan, "sum": np.nan, "loss": np.nan,
                "status": "failed", "error": exc.message}, None
    gdp, gdppc = loss_components(sim, hist)
    return {"beta": beta, "gdp": gdp, "gdppc": gdppc, "sum": gdp + gdppc, "loss": beta_loss(sim, hist, w),
            "status": "ok", "error": ""}, sim


def beta_grid_search(e: Economy, hist: MomentSet, grid: Sequence[float], w: float = 0.5,
                     opts: Optional[SolverOptions] = None, workers: int = 1,
                     horizon: Optional[int] = None) -> BetaSearchResult:
    """Simulate each β, score against `hist`; ties go to the smaller β."""
    grid = sorted(set(float(b) for b in grid))
    if not grid:
        raise UsageError("β grid is empty")
    if not 0.0 <= w <= 1.0:
        raise UsageError(f"Loss weight must lie in [0, 1], got {w}")
    horizon = int(horizon or hist.periods or e.horizon)
    devlog = opts.devlog if opts else None
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(_grid_point, e, b, hist, w, horizon, opts) for b in grid]
        results = [f.result() for f in futures]
    records, moments = [], {}
    for beta, (rec, sim) in zip(grid, results):
        records.append(rec)
        if sim is not None:
            moments[beta] = sim
        else:
            warn(f"β={beta:g} failed: {rec['error']}")
        log_event(devlog, "grid_point", rec)
    table = pd.DataFrame.from_records(records, columns=["beta", "gdp", "gdppc", "sum", "loss", "status", "error"])
    return BetaSearchResult(best_beta=best_of(table), table=table, weight=w, historical=hist, moments=moments)


def calibrate_alpha0(e: Economy, target_mean: float, horizon: Optional[int] = None,
                     opts: Optional[SolverOptions] = None, upper: float = 1.0, xtol: float = 1e-6) -> float:
    """Root-find α₀ so the simulated mean real GDP growth equals `target_mean` (percent)."""
    from decouple_dynamics import simulate

    horizon = int(horizon or e.horizon)
    if horizon < 2:
        raise UsageError("α₀ calibration needs a horizon of at least two periods")

    def gap(alpha0: float) -> float:
        path = simulate(e.replace(alpha0=alpha0), horizon=horizon, opts=opts)
        return growth_moments(path).gdp_mean - target_mean

    low = gap(0.0)
    if low > 0:
        raise CalibrationError("Target growth is below the growth reached without diffusion",
                               [{"target": target_mean, "growth_without_diffusion": low + target_mean}])
    hi = upper
    for _ in range(20):
        if gap(hi) >= 0:
            return float(brentq(gap, 0.0, hi, xtol=xtol))
        hi *= 2.0
    raise CalibrationError("No α₀ reaches the target growth", [{"target": target_mean, "largest_alpha0": hi}])


# ---------------------------------------------------------------------------
# Foreign-policy similarity
# ---------------------------------------------------------------------------

def fps_index(P: Any, marginals: Optional[Any] = None) -> float:
    """κ = 1 − Σ_{m≠n} P[m, n] / Σ_{m≠n} p_m p_n."""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise UsageError(f"Vote-share matrix must be square, got shape {P.shape}")
    if np.any(P < 0) or not math.isclose(P.sum(), 1.0, rel_tol=1e-9):
        raise UsageError("Vote-share matrix must be nonnegative and sum to 1", [{"total": float(P.sum())}])
    p = np.asarray(marginals, dtype=float) if marginals is not None else 0.5 * (P.sum(axis=0) + P.sum(axis=1))
    off = ~np.eye(P.shape[0], dtype=bool)
    expected = float((np.outer(p, p))[off].sum())
    if expected <= 0:
        raise DegenerateMarginals("Marginals put all mass on one option", [{"marginals": ",".join(map(str, p))}])
    return 1.0 - float(P[off].sum()) / expected


@dataclass(frozen=True)
class SimilarityMatrix:
    regions: Tuple[str, ...]
    values: np.ndarray

    def get(self, a: str, b: str) -> float:
        return float(self.values[self.regions.index(a), self.regions.index(b)])

    def differential(self, west: str, east: str) -> pd.Series:
        """κ(·, west) − κ(·, east), scaled by its largest absolute value."""
        for anchor in (west, east):
            if anchor not in self.regions:
                raise MissingCell(f"Anchor region {anchor} has no votes", [{"region": anchor}])
        raw = self.values[:, self.regions.index(west)] - self.values[:, self.regions.index(east)]
        scale = float(np.abs(raw).max())
        return pd.Series(raw / scale if scale > 0 else raw, index=list(self.regions), name="differential")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=list(self.regions), columns=list(self.regions))


def similarity_matrix(votes: TableSource) -> SimilarityMatrix:
    """Pairwise κ from a vote table (resolution, region, vote) over jointly voted resolutions."""
    df = _frame(votes, ("resolution", "region", "vote"), "Votes")
    df = df.dropna(subset=["vote"])
    options = sorted(df["vote"].astype(str).unique())
    code = {o: k for k, o in enumerate(options)}
    wide = df.assign(vote=df["vote"].astype(str).map(code)).pivot_table(
        index="resolution", columns="region", values="vote", aggfunc="first")
    regions = tuple(sorted(wide.columns))
    k = len(options)
    out = np.eye(len(regions))
    for a in range(len(regions)):
        for b in range(a + 1, len(regions)):
            pair = wide[[regions[a], regions[b]]].dropna().astype(int).to_numpy()
            if len(pair) == 0:
                raise MissingCell("Regions never voted on the same resolution",
                                  [{"region": regions[a], "other": regions[b]}])
            P = np.zeros((k, k))
            np.add.at(P, (pair[:, 0], pair[:, 1]), 1.0)
            P /= P.sum()
            try:
                kappa = fps_index(P)
            except DegenerateMarginals:
                kappa = 1.0
            out[a, b] = out[b, a] = kappa
    return SimilarityMatrix(regions=regions, values=out)


def assign_blocs(sim: SimilarityMatrix, west: str = "usa", east: str = "chn") -> Tuple[Dict[str, str], pd.Series]:
    diff = sim.differential(west, east)
    blocs = {region: ("West" if value >= 0 else "East") for region, value in diff.items()}
    return blocs, diff.sort_values(ascending=False, kind="mergesort")
