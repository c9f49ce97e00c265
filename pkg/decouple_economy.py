"""
Economy data model: definition, validation and share calibration.

An Economy is the immutable description of a multi-region, multi-sector world:
elasticities, share parameters, baseline trade frictions and the initial state.
Grids are numpy arrays indexed by position; the region/sector identifier maps are
fixed when the economy is built.

Axis conventions used across the package:
    (N, I)      region x sector                    kappa, chi, psi_*, lambda0
    (N, I, I)   region x using sector x input       eta
    (N, N, I)   source x destination x sector       tau0, tm0, trade shares
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from decouple_config import atomic_write_text, read_json, validate_document
from decouple_errors import (
    CalibrationError,
    IoFailure,
    NonPositiveState,
    UnbalancedFlows,
    UnknownRegion,
    UsageError,
)
from decouple_session_logger import warn

SHARE_TOL = 1e-6
DRIFT_TOL = 1e-9
BALANCE_TOL = 1e-6
PROHIBITIVE_COST = 1e6
DEFAULT_SIGMA = 3.0
DEFAULT_RENT = 0.15
FACTORS = ("labor", "capital", "profit")

# Behavioral parameters for the six-sector aggregation
REFERENCE_SECTORS = ("pri", "lmn", "hmn", "elm", "tas", "ots")
REFERENCE_REGIONS = ("chn", "e27", "jpn", "ind", "lac", "ode", "rwc", "rwu", "rus", "usa")
REFERENCE_THETA = {"pri": 10.09, "lmn": 4.60, "hmn": 5.99, "elm": 7.80, "tas": 2.80, "ots": 2.90}
REFERENCE_NU = {"pri": 0.27, "lmn": 1.20, "hmn": 1.26, "elm": 1.26, "tas": 1.26, "ots": 1.42}


def _frozen(a: Any, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Economy:
    regions: Tuple[str, ...]
    sectors: Tuple[str, ...]
    theta: np.ndarray
    sigma: np.ndarray
    nu: np.ndarray
    rho: np.ndarray
    mu: np.ndarray
    kappa: np.ndarray
    eta: np.ndarray
    psi_f: np.ndarray
    psi_m: np.ndarray
    psi_k: np.ndarray
    psi_l: np.ndarray
    chi: np.ndarray
    savings_rate: np.ndarray
    tb_rate: np.ndarray
    delta: np.ndarray
    tau0: np.ndarray
    tm0: np.ndarray
    beta: float
    alpha0: float
    alpha_growth: float
    lambda0: np.ndarray
    k0: np.ndarray
    l_path: np.ndarray
    horizon: int
    rent0: np.ndarray
    numeraire: float
    income0: Optional[np.ndarray] = None
    base_year: int = 0
    name: str = "economy"

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(str(r) for r in self.regions))
        object.__setattr__(self, "sectors", tuple(str(s) for s in self.sectors))
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray) or (f.name == "income0" and value is not None):
                object.__setattr__(self, f.name, _frozen(value))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "alpha0", float(self.alpha0))
        object.__setattr__(self, "alpha_growth", float(self.alpha_growth))
        object.__setattr__(self, "numeraire", float(self.numeraire))
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "base_year", int(self.base_year))

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def n_sectors(self) -> int:
        return len(self.sectors)

    def region_index(self, region: str) -> int:
        try:
            return self.regions.index(region)
        except ValueError:
            raise UnknownRegion(f"Unknown region '{region}'", [{"region": region, "known": ",".join(self.regions)}])

    def sector_index(self, sector: str) -> int:
        try:
            return self.sectors.index(sector)
        except ValueError:
            raise UnknownRegion(f"Unknown sector '{sector}'", [{"sector": sector, "known": ",".join(self.sectors)}])

    def replace(self, **changes: Any) -> "Economy":
        return dataclasses.replace(self, **changes)

    def labor_at(self, t: int) -> np.ndarray:
        return self.l_path[:, min(t, self.l_path.shape[1] - 1)]

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, np.ndarray):
                value = value.tolist()
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out


@dataclass(frozen=True)
class StateVector:
    lam: np.ndarray
    capital: np.ndarray
    labor: np.ndarray
    alpha: float
    period: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lam", _frozen(self.lam))
        object.__setattr__(self, "capital", _frozen(self.capital))
        object.__setattr__(self, "labor", _frozen(self.labor))
        problems = []
        if not np.all(np.isfinite(self.lam)) or np.any(self.lam < 0):
            problems.append({"field": "lambda", "min": float(np.nanmin(self.lam))})
        if not np.all(np.isfinite(self.capital)) or np.any(self.capital <= 0):
            problems.append({"field": "capital", "min": float(np.nanmin(self.capital))})
        if not np.all(np.isfinite(self.labor)) or np.any(self.labor <= 0):
            problems.append({"field": "labor", "min": float(np.nanmin(self.labor))})
        if not np.isfinite(self.alpha) or self.alpha < 0:
            problems.append({"field": "alpha", "value": float(self.alpha)})
        if problems:
            raise NonPositiveState(f"State for period {self.period} violates positivity", problems)


def initial_state(e: Economy) -> StateVector:
    return StateVector(lam=e.lambda0, capital=e.k0, labor=e.labor_at(0), alpha=e.alpha0, period=0)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    field: str
    index: Tuple[str, ...]
    value: float
    expected: str
    message: str

    def as_dict(self) -> Dict[str, Any]:
        return {"field": self.field, "index": ",".join(self.index), "value": self.value, "expected": self.expected}

    def __str__(self) -> str:
        where = f"[{','.join(self.index)}]" if self.index else ""
        return f"{self.field}{where}: {self.message}"


def _expected_shapes(n: int, i: int, t: int) -> Dict[str, Tuple[int, ...]]:
    return {
        "theta": (i,), "sigma": (i,), "nu": (i,), "rho": (i,), "mu": (i,),
        "kappa": (n, i), "eta": (n, i, i), "psi_f": (n, i), "psi_m": (n, i), "psi_k": (n, i), "psi_l": (n, i),
        "chi": (n, i), "savings_rate": (n,), "tb_rate": (n,), "delta": (n,),
        "tau0": (n, n, i), "tm0": (n, n, i), "lambda0": (n, i), "k0": (n,), "rent0": (n,),
        "l_path": (n, t),
    }


def validate_economy(e: Economy) -> List[Violation]:
    """Return every invariant violation; empty list means the economy is usable."""
    out: List[Violation] = []
    R, S = e.regions, e.sectors
    n, m = len(R), len(S)

    def add(fname, index, value, expected, message):
        out.append(Violation(fname, tuple(index), float(value), expected, message))

    shapes = _expected_shapes(n, m, e.l_path.shape[1] if e.l_path.ndim == 2 else 0)
    bad_shape = False
    for fname, shape in shapes.items():
        arr = getattr(e, fname)
        if fname == "l_path":
            ok = arr.ndim == 2 and arr.shape[0] == n
        else:
            ok = arr.shape == shape
        if not ok:
            add(fname, (), float(arr.size), f"shape {shape}", f"shape {arr.shape} does not match {shape}")
            bad_shape = True
    if bad_shape:
        return out

    for fname, arr in (("kappa", e.kappa), ("chi", e.chi)):
        sums = arr.sum(axis=1)
        for d in range(n):
            if abs(sums[d] - 1.0) > SHARE_TOL:
                add(fname, (R[d],), sums[d], "1", f"row sum {sums[d]:.6g} ≠ 1 (deviation {sums[d] - 1.0:+.3g})")
    eta_sums = e.eta.sum(axis=2)
    for d in range(n):
        for i in range(m):
            if abs(eta_sums[d, i] - 1.0) > SHARE_TOL:
                add("eta", (R[d], S[i]), eta_sums[d, i], "1", f"row sum {eta_sums[d, i]:.6g} ≠ 1")
    for a, b in (("psi_f", "psi_m"), ("psi_k", "psi_l")):
        total = getattr(e, a) + getattr(e, b)
        for d in range(n):
            for i in range(m):
                if abs(total[d, i] - 1.0) > SHARE_TOL:
                    add(f"{a}+{b}", (R[d], S[i]), total[d, i], "1", f"weights sum {total[d, i]:.6g} ≠ 1")
    for fname in ("kappa", "eta", "psi_f", "psi_m", "psi_k", "psi_l", "chi"):
        arr = getattr(e, fname)
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            idx = np.argwhere(~(arr >= 0))[0]
            add(fname, _labels(idx, fname, R, S), arr[tuple(idx)], ">= 0", "negative or non-finite share")

    for i in range(m):
        th, sg = e.theta[i], e.sigma[i]
        if not th > 0:
            add("theta", (S[i],), th, "> 0", "dispersion must be positive")
        if not sg > 1:
            add("sigma", (S[i],), sg, "> 1", "variety elasticity must exceed 1")
        if not th > sg - 1:
            add("theta", (S[i],), th, f"> {sg - 1:g}", f"theta ≤ sigma−1 ({th:g} ≤ {sg - 1:g}); price index diverges")
        for fname in ("nu", "rho", "mu"):
            v = getattr(e, fname)[i]
            if not v >= 0:
                add(fname, (S[i],), v, ">= 0", "substitution elasticity must be nonnegative")

    if not 0 <= e.beta < 1:
        add("beta", (), e.beta, "[0, 1)", "diffusion sensitivity outside [0, 1)")
    if not e.alpha0 >= 0:
        add("alpha0", (), e.alpha0, ">= 0", "arrival rate must be nonnegative")
    if not np.isfinite(e.alpha_growth) or e.alpha_growth <= -1:
        add("alpha_growth", (), e.alpha_growth, "> -1", "growth rate must exceed -100%")
    for d in range(n):
        if not 0 < e.savings_rate[d] < 1:
            add("savings_rate", (R[d],), e.savings_rate[d], "(0, 1)", "savings rate outside (0, 1)")
        if not 0 < e.delta[d] < 1:
            add("delta", (R[d],), e.delta[d], "(0, 1)", "depreciation outside (0, 1)")
        if e.savings_rate[d] - e.tb_rate[d] < 0:
            add("tb_rate", (R[d],), e.tb_rate[d], f"<= {e.savings_rate[d]:g}", "investment rate s − tb is negative")
        if not e.k0[d] > 0:
            add("k0", (R[d],), e.k0[d], "> 0", "initial capital must be positive")
        if not e.rent0[d] > 0:
            add("rent0", (R[d],), e.rent0[d], "> 0", "base rental rate must be positive")
        if np.all(e.lambda0[d] <= 0):
            add("lambda0", (R[d],), 0.0, "> 0 somewhere", "zero productivity in every sector")
    if np.any(e.lambda0 < 0) or not np.all(np.isfinite(e.lambda0)):
        idx = np.argwhere(~(e.lambda0 >= 0))[0]
        add("lambda0", (R[idx[0]], S[idx[1]]), e.lambda0[tuple(idx)], ">= 0", "negative productivity")
    for i in range(m):
        if np.all(e.lambda0[:, i] <= 0):
            add("lambda0", (S[i],), 0.0, "> 0 somewhere", "no region produces this sector")

    if e.horizon < 1:
        add("horizon", (), e.horizon, ">= 1", "horizon must be at least one period")
    if e.l_path.shape[1] < e.horizon:
        add("l_path", (), e.l_path.shape[1], f">= {e.horizon} periods", "labor path shorter than horizon")
    if np.any(e.l_path <= 0) or not np.all(np.isfinite(e.l_path)):
        idx = np.argwhere(~(e.l_path > 0))[0]
        add("l_path", (R[idx[0]], str(idx[1])), e.l_path[tuple(idx)], "> 0", "labor must be positive")
    if not e.numeraire > 0:
        add("numeraire", (), e.numeraire, "> 0", "world factor income must be positive")

    for fname, arr in (("tau0", e.tau0), ("tm0", e.tm0)):
        if np.any(arr < 1) or np.any(np.isnan(arr)):
            idx = np.argwhere(~(arr >= 1))[0]
            add(fname, (R[idx[0]], R[idx[1]], S[idx[2]]), arr[tuple(idx)], ">= 1", "trade friction below 1")
        for d in range(n):
            for i in range(m):
                if arr[d, d, i] != 1.0:
                    add(fname, (R[d], R[d], S[i]), arr[d, d, i], "1", "domestic cell must equal 1")

    if e.income0 is not None:
        balance = float(np.dot(e.tb_rate, e.income0))
        scale = float(np.abs(e.income0).sum()) or 1.0
        if abs(balance) / scale > SHARE_TOL:
            add("tb_rate", (), balance, "0", f"world trade balance Σ tb·Y = {balance:.6g} ≠ 0")
    return out


def _labels(idx: np.ndarray, fname: str, regions: Sequence[str], sectors: Sequence[str]) -> Tuple[str, ...]:
    if fname == "eta":
        return (regions[idx[0]], sectors[idx[1]], sectors[idx[2]])
    return (regions[idx[0]], sectors[idx[1]])


# ---------------------------------------------------------------------------
# JSON loading with broadcasting
# ---------------------------------------------------------------------------

def _broadcast(name: str, value: Any, shape: Tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    try:
        return np.array(np.broadcast_to(arr, shape), dtype=float)
    except ValueError:
        raise IoFailure(f"Field '{name}' with shape {arr.shape} cannot broadcast to {shape}",
                        [{"field": name, "shape": str(arr.shape), "expected": str(shape)}])


def _frictions(name: str, value: Any, n: int, m: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 3:
        return _broadcast(name, arr, (n, n, m))
    # Lower-rank frictions describe cross-border cells only.
    grid = _broadcast(name, arr, (n, n, m))
    grid[np.arange(n), np.arange(n), :] = 1.0
    return grid


def _normalize_pair(name_a: str, a: np.ndarray, name_b: str, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    total = a + b
    drift = np.abs(total - 1.0)
    small = (drift > 0) & (drift < DRIFT_TOL)
    if np.any(drift[small] > 1e-12):
        warn(f"Normalized {name_a}/{name_b} weights with drift up to {drift[small].max():.2e}")
    a = np.where(small, a / total, a)
    b = np.where(small, b / total, b)
    return a, b


def economy_from_dict(data: Mapping[str, Any], source: str = "<economy>") -> Economy:
    validate_document(data, "economy", source)
    regions = list(data["regions"])
    sectors = list(data["sectors"])
    n, m = len(regions), len(sectors)
    horizon = int(data.get("horizon", 1))

    def grid(key: str, shape: Tuple[int, ...], default: Any = None) -> np.ndarray:
        if key not in data:
            if default is None:
                raise IoFailure(f"{source}: missing field '{key}'", [{"field": key}])
            return _broadcast(key, default, shape)
        return _broadcast(key, data[key], shape)

    psi_f = grid("psi_f", (n, m))
    psi_m = grid("psi_m", (n, m), 1.0 - psi_f)
    psi_l = grid("psi_l", (n, m))
    psi_k = grid("psi_k", (n, m), 1.0 - psi_l)
    psi_f, psi_m = _normalize_pair("psi_f", psi_f, "psi_m", psi_m)
    psi_k, psi_l = _normalize_pair("psi_k", psi_k, "psi_l", psi_l)

    raw_l = np.asarray(data["l_path"], dtype=float)
    if raw_l.ndim == 0:
        raw_l = np.full(n, float(raw_l))
    if raw_l.ndim == 1:
        l_path = np.repeat(_broadcast("l_path", raw_l, (n,))[:, None], horizon, axis=1)
    else:
        l_path = raw_l

    k0 = grid("k0", (n,))
    rent0 = grid("rent0", (n,), DEFAULT_RENT)
    numeraire = data.get("numeraire")
    if numeraire is None:
        numeraire = float(np.sum(l_path[:, 0] + rent0 * k0))
    income0 = data.get("income0")

    return Economy(
        regions=tuple(regions),
        sectors=tuple(sectors),
        theta=grid("theta", (m,)),
        sigma=grid("sigma", (m,), DEFAULT_SIGMA),
        nu=grid("nu", (m,), 1.0),
        rho=grid("rho", (m,), 0.0),
        mu=grid("mu", (m,), 0.0),
        kappa=grid("kappa", (n, m)),
        eta=grid("eta", (n, m, m)),
        psi_f=psi_f, psi_m=psi_m, psi_k=psi_k, psi_l=psi_l,
        chi=grid("chi", (n, m)),
        savings_rate=grid("savings_rate", (n,)),
        tb_rate=grid("tb_rate", (n,), 0.0),
        delta=grid("delta", (n,), 0.05),
        tau0=_frictions("tau0", data.get("tau0", 1.0), n, m),
        tm0=_frictions("tm0", data.get("tm0", 1.0), n, m),
        beta=float(data.get("beta", 0.44)),
        alpha0=float(data.get("alpha0", 0.05)),
        alpha_growth=float(data.get("alpha_growth", 0.0118)),
        lambda0=grid("lambda0", (n, m)),
        k0=k0,
        l_path=l_path,
        horizon=horizon,
        rent0=rent0,
        numeraire=float(numeraire),
        income0=None if income0 is None else _broadcast("income0", income0, (n,)),
        base_year=int(data.get("base_year", 0)),
        name=str(data.get("name", "economy")),
    )


def load_economy(path: Path) -> Economy:
    path = Path(path).expanduser()
    return economy_from_dict(read_json(path), str(path))


def save_economy(e: Economy, path: Path) -> Path:
    # repr-exact floats keep a save/load cycle lossless
    return atomic_write_text(Path(path), json.dumps(e.to_dict(), indent=1) + "\n")


# ---------------------------------------------------------------------------
# Baseline flows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineFlows:
    """
    Base-year value flows. Trade is valued at producer prices; tariffs hold the
    revenue collected by the destination on each bilateral cell.
    """
    regions: Tuple[str, ...]
    sectors: Tuple[str, ...]
    trade: np.ndarray           # (N, N, I) source, dest, sector
    tariffs: np.ndarray         # (N, N, I)
    factors: np.ndarray         # (N, I, 3) labor, capital, profit
    intermediates: np.ndarray   # (N, I, I) region, using sector, input sector
    consumption: np.ndarray     # (N, I)
    investment: np.ndarray      # (N, I)

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "sectors", tuple(self.sectors))
        for name in ("trade", "tariffs", "factors", "intermediates", "consumption", "investment"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    def replace(self, **changes: Any) -> "BaselineFlows":
        return dataclasses.replace(self, **changes)

    def scaled(self, factor: float) -> "BaselineFlows":
        return self.replace(**{k: getattr(self, k) * factor for k in
                               ("trade", "tariffs", "factors", "intermediates", "consumption", "investment")})

    @property
    def sales(self) -> np.ndarray:
        return self.trade.sum(axis=1)

    @property
    def supply_cost(self) -> np.ndarray:
        return self.factors.sum(axis=2) + self.intermediates.sum(axis=2)

    @property
    def purchases(self) -> np.ndarray:
        """Buyer-price spending by destination and sector."""
        return (self.trade + self.tariffs).sum(axis=0)

    @property
    def uses(self) -> np.ndarray:
        return self.consumption + self.investment + self.intermediates.sum(axis=1)

    @property
    def tariff_revenue(self) -> np.ndarray:
        return self.tariffs.sum(axis=(0, 2))

    @property
    def income(self) -> np.ndarray:
        return self.factors.sum(axis=(1, 2)) + self.tariff_revenue

    def balance_violations(self, tol: float = BALANCE_TOL) -> List[Dict[str, Any]]:
        cells = []
        for label, lhs, rhs in (("supply", self.sales, self.supply_cost), ("demand", self.purchases, self.uses)):
            scale = np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), 1e-300)
            gap = np.abs(lhs - rhs) / scale
            for d, i in zip(*np.nonzero(gap > tol)):
                cells.append({"identity": label, "region": self.regions[d], "sector": self.sectors[i],
                              "lhs": float(lhs[d, i]), "rhs": float(rhs[d, i]), "relative_gap": float(gap[d, i])})
        for name in ("trade", "tariffs", "factors", "intermediates", "consumption", "investment"):
            arr = getattr(self, name)
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                cells.append({"identity": "nonnegative", "table": name, "min": float(np.nanmin(arr))})
        return cells

    def check_balanced(self, tol: float = BALANCE_TOL) -> None:
        cells = self.balance_violations(tol)
        if cells:
            raise UnbalancedFlows(f"Baseline flows violate {len(cells)} accounting identity cell(s)", cells)

    def profit_gaps(self, theta: np.ndarray, tol: float = BALANCE_TOL) -> List[Dict[str, Any]]:
        target = self.sales / (1.0 + np.asarray(theta)[None, :])
        profit = self.factors[:, :, 2]
        scale = np.maximum(target, 1e-300)
        gap = np.abs(profit - target) / scale
        cells = []
        for d, i in zip(*np.nonzero((gap > tol) & (self.sales > 0))):
            cells.append({"region": self.regions[d], "sector": self.sectors[i],
                          "profit": float(profit[d, i]), "target": float(target[d, i])})
        return cells


def _read_table(directory: Path, name: str, columns: Sequence[str], required: bool = True) -> Optional[pd.DataFrame]:
    path = directory / name
    if not path.exists():
        if required:
            raise UsageError(f"Missing flow table: {path}")
        return None
    try:
        df = pd.read_csv(path, dtype={c: str for c in columns if c != "value"}, encoding="utf-8")
    except Exception as e:
        raise IoFailure(f"Cannot parse {path}: {e}")
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise IoFailure(f"{path} lacks column(s) {missing}", [{"file": name, "column": c} for c in missing])
    values = pd.to_numeric(df["value"], errors="coerce")
    bad = values.isna() | (values < 0)
    if bad.any():
        cells = [{"file": name, "row": int(r) + 2, "column": "value", "value": str(df.loc[r, "value"])}
                 for r in df.index[bad]]
        raise IoFailure(f"{path} has NaN or negative values", cells)
    df["value"] = values.astype(float)
    return df


def _fill(df: Optional[pd.DataFrame], keys: Sequence[Tuple[str, Sequence[str]]], shape: Tuple[int, ...],
          name: str) -> np.ndarray:
    out = np.zeros(shape)
    if df is None:
        return out
    maps = [{label: k for k, label in enumerate(labels)} for _, labels in keys]
    for row in df.itertuples(index=False):
        idx = []
        for (col, _), mapping in zip(keys, maps):
            label = getattr(row, col)
            if label not in mapping:
                raise UnknownRegion(f"{name}: unknown {col} '{label}'", [{"file": name, "column": col, "value": label}])
            idx.append(mapping[label])
        out[tuple(idx)] += row.value
    return out


def load_flows(directory: Path) -> BaselineFlows:
    """
    Read a flow directory:
        trade.csv          source,dest,sector,value (producer prices)
        tariffs.csv        source,dest,sector,value (optional)
        factors.csv        region,sector,factor,value  (factor in labor|capital|profit)
        intermediates.csv  region,sector,input,value
        finaldemand.csv    region,sector,value
        investment.csv     region,sector,value
        sets.json          {"regions": [...], "sectors": [...]} (optional; else order of factors.csv)
    """
    directory = Path(directory).expanduser()
    if not directory.is_dir():
        raise UsageError(f"Flow directory not found: {directory}")
    factors = _read_table(directory, "factors.csv", ("region", "sector", "factor", "value"))
    sets_path = directory / "sets.json"
    if sets_path.exists():
        sets = read_json(sets_path)
        regions, sectors = list(sets["regions"]), list(sets["sectors"])
    else:
        regions = list(dict.fromkeys(factors["region"]))
        sectors = list(dict.fromkeys(factors["sector"]))
    n, m = len(regions), len(sectors)
    R, S, F = ("region", regions), ("sector", sectors), ("factor", FACTORS)
    trade = _read_table(directory, "trade.csv", ("source", "dest", "sector", "value"))
    tariffs = _read_table(directory, "tariffs.csv", ("source", "dest", "sector", "value"), required=False)
    interm = _read_table(directory, "intermediates.csv", ("region", "sector", "input", "value"), required=False)
    final = _read_table(directory, "finaldemand.csv", ("region", "sector", "value"))
    invest = _read_table(directory, "investment.csv", ("region", "sector", "value"))
    return BaselineFlows(
        regions=tuple(regions),
        sectors=tuple(sectors),
        trade=_fill(trade, [("source", regions), ("dest", regions), ("sector", sectors)], (n, n, m), "trade.csv"),
        tariffs=_fill(tariffs, [("source", regions), ("dest", regions), ("sector", sectors)], (n, n, m), "tariffs.csv"),
        factors=_fill(factors, [R, S, F], (n, m, 3), "factors.csv"),
        intermediates=_fill(interm, [R, S, ("input", sectors)], (n, m, m), "intermediates.csv"),
        consumption=_fill(final, [R, S], (n, m), "finaldemand.csv"),
        investment=_fill(invest, [R, S], (n, m), "investment.csv"),
    )


def save_flows(flows: BaselineFlows, directory: Path) -> Path:
    directory = Path(directory).expanduser()
    R, S = flows.regions, flows.sectors

    def frame(arr: np.ndarray, cols: Sequence[str], labels: Sequence[Sequence[str]]) -> str:
        rows = []
        for idx in np.ndindex(arr.shape):
            if arr[idx] != 0:
                rows.append([labels[k][j] for k, j in enumerate(idx)] + [repr(float(arr[idx]))])
        return pd.DataFrame(rows, columns=list(cols) + ["value"]).to_csv(index=False, lineterminator="\n")

    atomic_write_text(directory / "trade.csv", frame(flows.trade, ("source", "dest", "sector"), (R, R, S)))
    atomic_write_text(directory / "tariffs.csv", frame(flows.tariffs, ("source", "dest", "sector"), (R, R, S)))
    atomic_write_text(directory / "factors.csv", frame(flows.factors, ("region", "sector", "factor"), (R, S, FACTORS)))
    atomic_write_text(directory / "intermediates.csv", frame(flows.intermediates, ("region", "sector", "input"), (R, S, S)))
    atomic_write_text(directory / "finaldemand.csv", frame(flows.consumption, ("region", "sector"), (R, S)))
    atomic_write_text(directory / "investment.csv", frame(flows.investment, ("region", "sector"), (R, S)))
    atomic_write_text(directory / "sets.json", json.dumps({"regions": list(R), "sectors": list(S)}, indent=2) + "\n")
    return directory


# ---------------------------------------------------------------------------
# Share calibration
# ---------------------------------------------------------------------------

@dataclass
class ModelParameters:
    """Elasticities and dynamic settings that are not read off the flow data."""
    theta: Sequence[float]
    sigma: Any = DEFAULT_SIGMA
    nu: Any = 1.0
    rho: Any = 0.0
    mu: Any = 0.0
    beta: float = 0.44
    alpha0: float = 0.05
    alpha_growth: float = 0.0118
    delta: Any = 0.05
    rent0: Any = DEFAULT_RENT
    horizon: int = 20
    base_year: int = 0
    labor_path: Optional[Any] = None
    name: str = "calibrated"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], sectors: Sequence[str]) -> "ModelParameters":
        data = dict(data)
        theta = data.pop("theta", None)
        if isinstance(theta, Mapping):
            theta = [theta[s] for s in sectors]
        if theta is None:
            try:
                theta = [REFERENCE_THETA[s] for s in sectors]
            except KeyError as e:
                raise UsageError(f"No theta given and no reference value for sector {e}")
        nu = data.pop("nu", None)
        if isinstance(nu, Mapping):
            nu = [nu[s] for s in sectors]
        if nu is None:
            nu = [REFERENCE_NU.get(s, 1.0) for s in sectors]
        return cls(theta=theta, nu=nu, **data)


def _safe_share(num: np.ndarray, den: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    return np.where(den > 0, out, fallback)


def calibrate_shares(flows: BaselineFlows, params: ModelParameters) -> Economy:
    """
    Read share parameters off balanced base-year flows with base prices equal to 1.

    Under that normalization each price index equals one, so the domestic share pins
    the Fréchet location (λ_d = π_dd Γ₁^θ) and every bilateral share pins its iceberg
    cost; the calibrated economy reproduces the observed shares at baseline.
    """
    from decouple_equilibrium import gamma1

    flows.check_balanced()
    n, m = len(flows.regions), len(flows.sectors)
    theta = _broadcast("theta", params.theta, (m,))
    sigma = _broadcast("sigma", params.sigma, (m,))

    gaps = flows.profit_gaps(theta)
    if gaps:
        raise UnbalancedFlows("Profit income differs from sales/(1+θ); run profit_rebalance first", gaps)

    consumption_total = flows.consumption.sum(axis=1)
    investment_total = flows.investment.sum(axis=1)
    income = flows.income
    uniform = np.full((n, m), 1.0 / m)

    kappa = _safe_share(flows.consumption, consumption_total[:, None], uniform)
    chi = _safe_share(flows.investment, investment_total[:, None], uniform)
    for d in np.nonzero(investment_total <= 0)[0]:
        warn(f"Region {flows.regions[d]} has no investment; using uniform investment shares")
    savings = 1.0 - consumption_total / income
    tb = (income - consumption_total - investment_total) / income

    interm = flows.intermediates
    interm_total = interm.sum(axis=2)
    eta = _safe_share(interm, interm_total[:, :, None], np.full((n, m, m), 1.0 / m))
    labor, capital = flows.factors[:, :, 0], flows.factors[:, :, 1]
    va = labor + capital
    cost = va + interm_total
    psi_f = _safe_share(va, cost, np.ones((n, m)))
    psi_m = 1.0 - psi_f
    psi_l = _safe_share(labor, va, np.full((n, m), 0.5))
    psi_k = 1.0 - psi_l

    tm = _safe_share(flows.trade + flows.tariffs, flows.trade, np.ones((n, n, m)))
    spend = flows.trade + flows.tariffs
    pi = _safe_share(spend, spend.sum(axis=0)[None, :, :], np.zeros((n, n, m)))

    g1 = gamma1(theta, sigma)
    own = pi[np.arange(n), np.arange(n), :]                       # (N, I) domestic share of each source
    lam = own * g1[None, :] ** theta[None, :]
    tau = np.full((n, n, m), PROHIBITIVE_COST)
    with np.errstate(divide="ignore", invalid="ignore"):
        implied = (own[:, None, :] / pi) ** (1.0 / theta[None, None, :]) / tm
    live = (pi > 0) & (own[:, None, :] > 0)
    tau = np.where(live, implied, tau)
    tau[np.arange(n), np.arange(n), :] = 1.0
    tm = np.where(live, tm, 1.0)
    tm[np.arange(n), np.arange(n), :] = 1.0
    below = np.argwhere((tau < 1.0 - 1e-12))
    if below.size:
        cells = [{"source": flows.regions[s], "dest": flows.regions[d], "sector": flows.sectors[i],
                  "implied_tau": float(tau[s, d, i])} for s, d, i in below]
        raise CalibrationError("Observed shares imply iceberg costs below 1", cells)
    tau = np.maximum(tau, 1.0)
    for s, i in np.argwhere(own <= 0):
        warn(f"{flows.regions[s]}/{flows.sectors[i]} has no domestic sales; λ set to zero")

    labor_income = labor.sum(axis=1)
    rent0 = _broadcast("rent0", params.rent0, (n,))
    k0 = capital.sum(axis=1) / rent0
    horizon = int(params.horizon)
    if params.labor_path is not None:
        l_path = np.asarray(params.labor_path, dtype=float)
        if l_path.ndim == 1:
            l_path = np.repeat(l_path[:, None], horizon, axis=1)
        l_path = l_path * (labor_income / l_path[:, 0])[:, None]
    else:
        l_path = np.repeat(labor_income[:, None], horizon, axis=1)

    return Economy(
        regions=flows.regions,
        sectors=flows.sectors,
        theta=theta,
        sigma=sigma,
        nu=_broadcast("nu", params.nu, (m,)),
        rho=_broadcast("rho", params.rho, (m,)),
        mu=_broadcast("mu", params.mu, (m,)),
        kappa=kappa,
        eta=eta,
        psi_f=psi_f, psi_m=psi_m, psi_k=psi_k, psi_l=psi_l,
        chi=chi,
        savings_rate=savings,
        tb_rate=tb,
        delta=_broadcast("delta", params.delta, (n,)),
        tau0=tau,
        tm0=tm,
        beta=params.beta,
        alpha0=params.alpha0,
        alpha_growth=params.alpha_growth,
        lambda0=lam,
        k0=k0,
        l_path=l_path,
        horizon=horizon,
        rent0=rent0,
        numeraire=float(labor_income.sum() + capital.sum()),
        income0=income,
        base_year=params.base_year,
        name=params.name,
    )


def observed_shares(flows: BaselineFlows) -> np.ndarray:
    spend = flows.trade + flows.tariffs
    n, m = len(flows.regions), len(flows.sectors)
    return _safe_share(spend, spend.sum(axis=0)[None, :, :], np.zeros((n, n, m)))
