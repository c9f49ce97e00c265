"""
Recursive dynamics: laws of motion and full simulation paths.

Each period solves a static equilibrium, then advances the state:
    k' = (1 − δ) k + in
    λ' = λ + α Γ(1 − β) Σ_j η[d, i, j] Σ_s π[s, d, j]^(1 − β) λ[s, j]^β
    α' = α (1 + g)
Diffusion uses the shares of the period just solved, so insights land one period later.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import gamma

from decouple_devlog import log_event
from decouple_economy import Economy, StateVector, initial_state
from decouple_equilibrium import EquilibriumSolution, SolverOptions, base_policy, solve_static
from decouple_errors import IoFailure, MissingCell, NoConvergence, UsageError


def capital_step(k_prev: Any, delta: Any, investment: Any) -> np.ndarray:
    return (1.0 - np.asarray(delta, dtype=float)) * np.asarray(k_prev, dtype=float) + np.asarray(investment, dtype=float)


def alpha_step(alpha_prev: float, growth: float) -> float:
    return float(alpha_prev) * (1.0 + float(growth))


def diffusion_step(lam_prev: Any, eta: Any, pi_prev: Any, alpha: float, beta: float) -> np.ndarray:
    """
    Expected arrival of new ideas given last period's supplier shares.

    lam_prev (N, I), eta (N, I, I) [d, using i, supplying j], pi_prev (N, N, I) [s, d, j].
    """
    lam = np.asarray(lam_prev, dtype=float)
    pi = np.asarray(pi_prev, dtype=float)
    learned = np.einsum("sdj,sj->dj", pi ** (1.0 - beta), lam ** beta)
    gain = alpha * gamma(1.0 - beta) * np.einsum("dij,dj->di", np.asarray(eta, dtype=float), learned)
    return lam + gain


def marginal_diffusion_gain(alpha: float, beta: float, eta: float, pi_home: float,
                            lam_home: float, lam_foreign: float) -> float:
    """∂Δλ_h/∂π_h along π_f = 1 − π_h for a two-source sector."""
    return float(alpha * gamma(1.0 - beta) * eta * (1.0 - beta) * (
        pi_home ** (-beta) * lam_home ** beta - (1.0 - pi_home) ** (-beta) * lam_foreign ** beta))


def labor_path_from_anchors(source: Union[Path, pd.DataFrame], regions: Sequence[str], base_year: int,
                            horizon: int) -> np.ndarray:
    """
    Labor by region and period from anchor years (region, year, value).
    Values between anchors are interpolated geometrically; outside the anchor range
    the nearest anchor value is held.
    """
    if isinstance(source, pd.DataFrame):
        df = source
    else:
        path = Path(source).expanduser()
        if not path.exists():
            raise UsageError(f"Labor path file not found: {path}")
        df = pd.read_csv(path, dtype={"region": str})
    missing_cols = {"region", "year", "value"} - set(df.columns)
    if missing_cols:
        raise IoFailure(f"Labor path table lacks column(s) {sorted(missing_cols)}")
    values = pd.to_numeric(df["value"], errors="coerce")
    bad = values.isna() | (values <= 0)
    if bad.any():
        raise IoFailure("Labor path has non-positive or missing values",
                        [{"row": int(r) + 2, "value": str(df.loc[r, "value"])} for r in df.index[bad]])
    years = base_year + np.arange(horizon)
    out = np.empty((len(regions), horizon))
    for d, region in enumerate(regions):
        rows = df[df["region"] == region].assign(value=values).sort_values("year")
        if rows.empty:
            raise MissingCell(f"No labor anchors for region {region}", [{"region": region}])
        out[d] = np.exp(np.interp(years, rows["year"].to_numpy(float), np.log(rows["value"].to_numpy(float))))
    return out


@dataclass(frozen=True)
class SimulationPath:
    economy: Economy
    solutions: Tuple[EquilibriumSolution, ...]
    states: Tuple[StateVector, ...]
    diffusion: bool = True
    label: str = "baseline"

    @property
    def horizon(self) -> int:
        return len(self.solutions)

    @property
    def years(self) -> List[int]:
        return [self.economy.base_year + t for t in range(self.horizon)]

    def series(self, attr: str) -> np.ndarray:
        """Stack a per-region solution attribute into (N, T)."""
        return np.stack([np.asarray(getattr(sol, attr)) for sol in self.solutions], axis=-1)

    def real_income(self) -> np.ndarray:
        return np.stack([sol.real_income for sol in self.solutions], axis=-1)

    def gdp(self) -> np.ndarray:
        """
        Real GDP used by the growth moments. Income deflated by P^c is the only real
        aggregate the model carries, so this is the real_income series.
        """
        return self.real_income()

    def gdp_per_capita(self, population: Optional[np.ndarray] = None) -> np.ndarray:
        pop = population if population is not None else np.stack([s.labor for s in self.states], axis=-1)
        return self.real_income() / pop

    def bilateral_trade(self) -> np.ndarray:
        """(N source, N dest, T) producer-value trade summed over sectors."""
        return np.stack([sol.trade_values.sum(axis=2) for sol in self.solutions], axis=-1)

    def bloc_trade(self, blocs: Mapping[str, str]) -> Dict[str, np.ndarray]:
        """Cross-bloc exports + imports per region and for the world, each a (T,) series."""
        regions = self.economy.regions
        labels = np.array([blocs.get(r, "") for r in regions])
        cross = labels[:, None] != labels[None, :]
        flows = self.bilateral_trade()
        out: Dict[str, np.ndarray] = {}
        for d, region in enumerate(regions):
            out[region] = (flows[d][cross[d]].sum(axis=0) + flows[:, d][cross[:, d]].sum(axis=0))
        out["world"] = flows[cross].sum(axis=0)
        return out

    def lambda_path(self) -> np.ndarray:
        """(N, I, T)."""
        return np.stack([st.lam for st in self.states], axis=-1)


def _as_shock_list(shocks: Any) -> List[Any]:
    if shocks is None:
        return []
    if hasattr(shocks, "apply"):
        return [shocks]
    return list(shocks)


def simulate(e: Economy, shocks: Any = None, horizon: Optional[int] = None,
             opts: Optional[SolverOptions] = None, diffusion: bool = True,
             label: str = "baseline",
             on_period: Optional[Callable[[int, EquilibriumSolution], None]] = None) -> SimulationPath:
    """
    Run the recursive path. `shocks` is None, one shock, or a list; each exposes
    apply(policy, t) -> policy. With diffusion=False, λ stays at its initial value.
    """
    horizon = int(horizon or e.horizon)
    if horizon < 1:
        raise UsageError("Horizon must be at least 1")
    if e.l_path.shape[1] < horizon:
        raise UsageError(f"Labor path covers {e.l_path.shape[1]} periods, horizon is {horizon}")
    opts = opts or SolverOptions()
    shock_list = _as_shock_list(shocks)
    policy0 = base_policy(e)
    state = initial_state(e)
    solutions: List[EquilibriumSolution] = []
    states: List[StateVector] = []
    warm: Optional[EquilibriumSolution] = None

    for t in range(horizon):
        pol = policy0
        for shock in shock_list:
            pol = shock.apply(pol, t)
        try:
            sol = solve_static(e, state, pol, opts, warm)
        except NoConvergence as exc:
            raise exc.at_period(t)
        solutions.append(sol)
        states.append(state)
        warm = sol
        log_event(opts.devlog, "period_end", {"label": label, "period": t, "iterations": sol.iterations,
                                              "residual": sol.residual})
        if on_period:
            on_period(t, sol)
        if t == horizon - 1:
            break
        lam_next = diffusion_step(state.lam, e.eta, sol.shares, state.alpha, e.beta) if diffusion else state.lam
        state = StateVector(
            lam=lam_next,
            capital=capital_step(state.capital, e.delta, sol.investment),
            labor=e.labor_at(t + 1),
            alpha=alpha_step(state.alpha, e.alpha_growth),
            period=t + 1,
        )
    return SimulationPath(economy=e, solutions=tuple(solutions), states=tuple(states),
                          diffusion=diffusion, label=label)
