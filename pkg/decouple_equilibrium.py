"""
Static general equilibrium for one period.

Given an Economy, a StateVector (λ, k, ℓ, α) and the period's trade frictions, find
factor prices (w, r) and commodity prices p such that goods, labor and capital
markets clear and income satisfies Y = wℓ + rk + T + ΣΠ.

Scheme:
    outer loop   damped multiplicative update of (w, r) on relative factor excess
    inner loop   p = Γ₁ Φ(p, w, r)^(−1/θ), a contraction in p (weight ψ_m < 1)
    goods/income linear in (e, Y) at given prices; solved exactly each outer step
World factor income Σ(wℓ + rk) is pinned to Economy.numeraire.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy.special import gamma, xlogy

from decouple_devlog import log_event
from decouple_economy import BaselineFlows, Economy, StateVector
from decouple_errors import (
    DivergentIndex,
    NegativeInvestment,
    NoConvergence,
    NonPositivePrice,
    SimulationError,
)

CD_EPS = 1e-12


@dataclass(frozen=True)
class PolicyInputs:
    tau: np.ndarray
    tm: np.ndarray
    regions: Tuple[str, ...] = ()
    sectors: Tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("tau", "tm"):
            arr = np.array(getattr(self, name), dtype=float, copy=True)
            if np.any(arr < 1) or np.any(np.isnan(arr)):
                raise SimulationError(f"Policy grid {name} has cells below 1",
                                      [{"grid": name, "min": float(np.nanmin(arr))}])
            n = arr.shape[0]
            if np.any(arr[np.arange(n), np.arange(n), :] != 1.0):
                raise SimulationError(f"Policy grid {name} must be 1 on domestic cells")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "sectors", tuple(self.sectors))

    def replace(self, **changes: Any) -> "PolicyInputs":
        return dataclasses.replace(self, **changes)


def base_policy(e: Economy) -> PolicyInputs:
    return PolicyInputs(tau=e.tau0, tm=e.tm0, regions=e.regions, sectors=e.sectors)


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 10000
    damping: float = 0.5
    inner_tol: float = 1e-10
    inner_max_iter: int = 10000
    min_damping: float = 1.0 / 64
    devlog: Optional[Path] = None

    @classmethod
    def from_settings(cls, settings: Any, devlog: Optional[Path] = None) -> "SolverOptions":
        return cls(tol=settings.tol, max_iter=settings.max_iter, damping=settings.damping,
                   inner_tol=settings.inner_tol, inner_max_iter=settings.inner_max_iter, devlog=devlog)


@dataclass(frozen=True)
class EquilibriumSolution:
    regions: Tuple[str, ...]
    sectors: Tuple[str, ...]
    wages: np.ndarray               # (N,)
    rents: np.ndarray               # (N,) per unit of capital stock
    unit_costs: np.ndarray          # (N, I)
    prices: np.ndarray              # (N, I)
    landed: np.ndarray              # (N, N, I)
    shares: np.ndarray              # (N, N, I) π[s, d, i]
    expenditure: np.ndarray         # (N, I) buyer value, all agents
    consumption: np.ndarray         # (N, I) spending
    investment_spend: np.ndarray    # (N, I) spending
    intermediate_spend: np.ndarray  # (N, I) spending by input sector
    sales: np.ndarray               # (N, I) producer value
    profits: np.ndarray             # (N, I)
    factor_income: np.ndarray       # (N,)
    transfers: np.ndarray           # (N,)
    income: np.ndarray              # (N,)
    trade_balance: np.ndarray       # (N,)
    consumer_price: np.ndarray      # (N,)
    investment_price: np.ndarray    # (N,)
    investment: np.ndarray          # (N,) quantity
    labor: np.ndarray               # (N,)
    capital: np.ndarray             # (N,)
    iterations: int = 0
    residual: float = 0.0
    period: int = 0
    tariff_factors: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def real_income(self) -> np.ndarray:
        return self.income / self.consumer_price

    @property
    def trade_values(self) -> np.ndarray:
        """Bilateral flows at producer value, (N, N, I)."""
        tm = self.tariff_factors if self.tariff_factors is not None else 1.0
        return self.shares * self.expenditure[None, :, :] / tm

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for f in dataclasses.fields(self):
            if f.name == "tariff_factors":
                continue
            value = getattr(self, f.name)
            out[f.name] = value.tolist() if isinstance(value, np.ndarray) else (
                list(value) if isinstance(value, tuple) else value)
        out["real_income"] = self.real_income.tolist()
        return out


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def ces_price(weights: Any, prices: Any, elasticity: Any, axis: int = -1) -> np.ndarray:
    """
    (Σ w p^(1−e))^(1/(1−e)) along `axis`; e=1 is the Cobb-Douglas limit exp(Σ w ln p),
    e=0 the Leontief (linear) limit. `elasticity` broadcasts against the reduced shape.
    """
    w = np.asarray(weights, dtype=float)
    p = np.asarray(prices, dtype=float)
    w, p = np.broadcast_arrays(w, p)
    live = w > 0
    if np.any(p[live] <= 0) or not np.all(np.isfinite(p[live])):
        bad = np.argwhere(live & ~(p > 0))
        raise NonPositivePrice("Non-positive price in CES aggregate",
                               [{"index": ",".join(map(str, idx)), "price": float(p[tuple(idx)])} for idx in bad[:10]])
    r = 1.0 - np.asarray(elasticity, dtype=float)
    rx = np.expand_dims(r, axis) if r.ndim else r
    cobb = np.abs(rx) < CD_EPS
    logp = np.log(np.where(live, p, 1.0))
    powered = np.where(live, w * np.exp(np.where(cobb, 1.0, rx) * logp), 0.0)
    total = powered.sum(axis=axis)
    r_safe = np.where(np.abs(r) < CD_EPS, 1.0, r)
    ces = total ** (1.0 / r_safe)
    geo = np.exp(np.where(live, w * logp, 0.0).sum(axis=axis))
    return np.where(np.abs(r) < CD_EPS, geo, ces)


def ces_shares(weights: Any, prices: Any, elasticity: Any, axis: int = -1) -> np.ndarray:
    """Cost shares w p^(1−e) / Σ w p^(1−e) along `axis`."""
    w = np.asarray(weights, dtype=float)
    p = np.asarray(prices, dtype=float)
    w, p = np.broadcast_arrays(w, p)
    r = 1.0 - np.asarray(elasticity, dtype=float)
    rx = np.expand_dims(r, axis) if r.ndim else r
    live = w > 0
    terms = np.where(live, w * np.exp(rx * np.log(np.where(live, p, 1.0))), 0.0)
    total = terms.sum(axis=axis, keepdims=True)
    return np.divide(terms, total, out=np.zeros_like(terms), where=total > 0)


def bundle_cost(pf: Any, pm: Any, psi_f: Any, psi_m: Any, rho: Any) -> np.ndarray:
    """c = [ψ_f pf^(1−ρ) + ψ_m pm^(1−ρ)]^(1/(1−ρ))."""
    pf, pm, psi_f, psi_m = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (pf, pm, psi_f, psi_m)))
    return ces_price(np.stack([psi_f, psi_m], axis=-1), np.stack([pf, pm], axis=-1), rho)


def factor_price(e: Economy, w: np.ndarray, r: np.ndarray) -> np.ndarray:
    """CES(ν) aggregate of w and the capital service price r/rent0, (N, I)."""
    n, m = e.n_regions, e.n_sectors
    prices = np.stack([np.broadcast_to(w[:, None], (n, m)), np.broadcast_to((r / e.rent0)[:, None], (n, m))], axis=-1)
    return ces_price(np.stack([e.psi_l, e.psi_k], axis=-1), prices, e.nu[None, :])


def intermediate_price(e: Economy, p: np.ndarray) -> np.ndarray:
    return ces_price(e.eta, np.broadcast_to(p[:, None, :], e.eta.shape), e.mu[None, :])


def unit_cost(e: Economy, p: np.ndarray, w: np.ndarray, r: np.ndarray) -> np.ndarray:
    return bundle_cost(factor_price(e, w, r), intermediate_price(e, p), e.psi_f, e.psi_m, e.rho[None, :])


def landed_cost(c: Any, tau: Any, tm: Any) -> np.ndarray:
    """x̃[s, d, i] = tm · τ · c[s, i]."""
    c = np.asarray(c, dtype=float)
    if c.ndim == 2:
        c = c[:, None, :]
    return np.asarray(tm, dtype=float) * np.asarray(tau, dtype=float) * c


def gamma1(theta: Any, sigma: Any) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    bad = ~(theta > sigma - 1)
    if np.any(bad):
        cells = [{"theta": float(t), "sigma": float(s)} for t, s in zip(*np.broadcast_arrays(theta, sigma)) if not t > s - 1] \
            if theta.ndim else [{"theta": float(theta), "sigma": float(sigma)}]
        raise DivergentIndex("Price index diverges for θ ≤ σ−1", cells)
    a = (sigma - 1.0) / theta
    markup = (sigma / (sigma - 1.0)) ** (-theta)
    return ((1.0 - a + a * markup) * gamma((1.0 - sigma + theta) / theta)) ** (1.0 / (1.0 - sigma))


def _phi_terms(lam: Any, landed: Any, theta: Any) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    landed = np.asarray(landed, dtype=float)
    if landed.ndim == lam.ndim + 1:
        lam = np.expand_dims(lam, 1)
    return lam * landed ** (-np.asarray(theta, dtype=float))


def price_index(lam: Any, landed: Any, theta: Any, sigma: Any) -> np.ndarray:
    """p = Γ₁ Φ^(−1/θ) with Φ = Σ_s λ_s x̃_s^(−θ) summed over sources (axis 0)."""
    g1 = gamma1(theta, sigma)
    phi = _phi_terms(lam, landed, theta).sum(axis=0)
    if np.any(~(phi > 0)):
        raise NonPositivePrice("No active supplier: Φ = 0", [{"cells": int(np.sum(~(phi > 0)))}])
    return g1 * phi ** (-1.0 / np.asarray(theta, dtype=float))


def trade_shares(lam: Any, landed: Any, theta: Any) -> np.ndarray:
    terms = _phi_terms(lam, landed, theta)
    phi = terms.sum(axis=0, keepdims=True)
    if np.any(~(phi > 0)):
        raise NonPositivePrice("No active supplier: Φ = 0")
    return terms / phi


def profits(pi: Any, expenditure: Any, theta: Any, tm: Any = None) -> np.ndarray:
    """
    Π[s, i] = Σ_d π[s, d, i] e[d, i] / tm[s, d, i] / (1 + θ_i).

    Profit is measured on producer-value sales, net of the tariff wedge tm.
    """
    pi = np.asarray(pi, dtype=float)
    spend = pi * np.asarray(expenditure, dtype=float)[None, :, :]
    if tm is not None:
        spend = spend / np.asarray(tm, dtype=float)
    return spend.sum(axis=1) / (1.0 + np.asarray(theta, dtype=float))


def consumer_demand(income: Any, savings_rate: Any, kappa: Any, p: Any) -> Tuple[np.ndarray, np.ndarray]:
    """Cobb-Douglas quantities and P^c = K Π p^κ with K = Π κ^(−κ)."""
    Y = np.asarray(income, dtype=float)
    s = np.asarray(savings_rate, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(p[kappa > 0] <= 0):
        raise NonPositivePrice("Non-positive consumer price")
    q = np.divide(((1.0 - s) * Y)[..., None] * kappa, p, out=np.zeros(np.broadcast(kappa, p).shape), where=kappa > 0)
    log_pc = xlogy(kappa, np.where(kappa > 0, p, 1.0)).sum(axis=-1) - xlogy(kappa, kappa).sum(axis=-1)
    return q, np.exp(log_pc)


def investment_demand(income: Any, savings_rate: Any, tb_rate: Any, chi: Any, p: Any
                      ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Leontief investment: p_in = Σ χ p, in = (s − tb) Y / p_in, q = χ in."""
    rate = np.asarray(savings_rate, dtype=float) - np.asarray(tb_rate, dtype=float)
    if np.any(rate < 0):
        raise NegativeInvestment("Savings rate below trade-balance rate", [{"investment_rate": float(np.min(rate))}])
    chi = np.asarray(chi, dtype=float)
    p_in = (chi * np.asarray(p, dtype=float)).sum(axis=-1)
    inv = rate * np.asarray(income, dtype=float) / p_in
    return inv, chi * np.asarray(inv)[..., None], p_in


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def _solve_prices(e: Economy, lam: np.ndarray, pol: PolicyInputs, w: np.ndarray, r: np.ndarray,
                  p: np.ndarray, opts: SolverOptions) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    change = np.inf
    for it in range(1, opts.inner_max_iter + 1):
        c = unit_cost(e, p, w, r)
        x = landed_cost(c, pol.tau, pol.tm)
        p_new = price_index(lam, x, e.theta, e.sigma)
        rel = np.abs(p_new / p - 1.0)
        change = float(rel.max())
        p = p_new
        if change < opts.inner_tol:
            c = unit_cost(e, p, w, r)
            return p, c, landed_cost(c, pol.tau, pol.tm)
    d, i = np.unravel_index(int(np.argmax(rel)), rel.shape)
    raise NoConvergence(opts.inner_max_iter, change, {"market": "price", "region": e.regions[d], "sector": e.sectors[i]})


def _cost_split(e: Economy, p: np.ndarray, w: np.ndarray, r: np.ndarray):
    n, m = e.n_regions, e.n_sectors
    pf = factor_price(e, w, r)
    pm = intermediate_price(e, p)
    split = ces_shares(np.stack([e.psi_f, e.psi_m], axis=-1), np.stack([pf, pm], axis=-1), e.rho[None, :])
    f_prices = np.stack([np.broadcast_to(w[:, None], (n, m)), np.broadcast_to((r / e.rent0)[:, None], (n, m))], axis=-1)
    lk = ces_shares(np.stack([e.psi_l, e.psi_k], axis=-1), f_prices, e.nu[None, :])
    inputs = ces_shares(e.eta, np.broadcast_to(p[:, None, :], e.eta.shape), e.mu[None, :])
    return split[..., 0], split[..., 1], lk[..., 0], lk[..., 1], inputs


def _tb_matrix(tb: np.ndarray) -> np.ndarray:
    """TB = M @ Y; the last region absorbs the world residual."""
    n = tb.shape[0]
    mat = np.diag(tb).astype(float)
    if n > 1:
        mat[-1, :] = -tb
        mat[-1, -1] = 0.0
    else:
        mat[0, 0] = 0.0
    return mat


def _goods_and_income(e: Economy, pi: np.ndarray, pol: PolicyInputs, p: np.ndarray, F: np.ndarray,
                      sm: np.ndarray, inputs: np.ndarray):
    """Solve the linear goods/income block for expenditure e (N, I) and income Y (N)."""
    n, m = e.n_regions, e.n_sectors
    ne = n * m
    eye_n, eye_m = np.eye(n), np.eye(m)
    G = np.transpose(pi / pol.tm, (0, 2, 1))                               # (s, i, d)
    MX = np.einsum("sid,ij->sidj", G, eye_m).reshape(ne, ne)               # X = MX @ E
    A = (e.theta / (1.0 + e.theta))[None, :, None] * sm[:, :, None] * inputs   # (d, i, j)
    Aexp = np.einsum("dij,ds->djsi", A, eye_n).reshape(ne, ne)
    chi_spend = e.chi * p / (e.chi * p).sum(axis=1, keepdims=True)
    TB = _tb_matrix(e.tb_rate)
    own = (1.0 - e.savings_rate)[:, None] * e.kappa + chi_spend * e.savings_rate[:, None]
    C = own[:, :, None] * eye_n[:, None, :] - chi_spend[:, :, None] * TB[:, None, :]
    R = (pi * (1.0 - 1.0 / pol.tm)).sum(axis=0)                            # (d, i)
    Rexp = np.einsum("dj,de->dej", R, eye_n).reshape(n, ne)
    Pexp = np.einsum("de,i->dei", eye_n, 1.0 / (1.0 + e.theta)).reshape(n, ne)

    mat = np.zeros((ne + n, ne + n))
    mat[:ne, :ne] = np.eye(ne) - Aexp @ MX
    mat[:ne, ne:] = -C.reshape(ne, n)
    mat[ne:, :ne] = -(Rexp + Pexp @ MX)
    mat[ne:, ne:] = eye_n
    rhs = np.concatenate([np.zeros(ne), F])
    z = np.linalg.solve(mat, rhs)
    E = z[:ne].reshape(n, m)
    Y = z[ne:]
    X = (MX @ z[:ne]).reshape(n, m)
    return E, Y, X, TB @ Y, chi_spend


def solve_static(e: Economy, st: StateVector, pol: Optional[PolicyInputs] = None,
                 opts: Optional[SolverOptions] = None,
                 warm: Optional[EquilibriumSolution] = None) -> EquilibriumSolution:
    pol = pol or base_policy(e)
    opts = opts or SolverOptions()
    n, m = e.n_regions, e.n_sectors
    lam, k, l = np.asarray(st.lam), np.asarray(st.capital), np.asarray(st.labor)
    theta = e.theta

    if warm is not None:
        w, r, p = warm.wages.copy(), warm.rents.copy(), warm.prices.copy()
    else:
        w, r, p = np.ones(n), e.rent0.copy(), np.ones((n, m))
    log_event(opts.devlog, "solve_start", {"period": st.period, "regions": n, "sectors": m})

    damping = opts.damping
    previous = np.inf
    residual = np.inf
    worst: Dict[str, Any] = {}
    for it in range(1, opts.max_iter + 1):
        scale = e.numeraire / float(w @ l + r @ k)
        w, r, p = w * scale, r * scale, p * scale
        p, c, x = _solve_prices(e, lam, pol, w, r, p, opts)
        pi = trade_shares(lam, x, theta)
        sf, sm, sl, sk, inputs = _cost_split(e, p, w, r)
        F = w * l + r * k
        E, Y, X, TB, chi_spend = _goods_and_income(e, pi, pol, p, F, sm, inputs)
        cost = X * (theta / (1.0 + theta))[None, :]
        labor_bill = (cost * sf * sl).sum(axis=1)
        capital_bill = (cost * sf * sk).sum(axis=1)
        ex_l = labor_bill / (w * l) - 1.0
        ex_k = capital_bill / (r * k) - 1.0
        residual = float(max(np.abs(ex_l).max(), np.abs(ex_k).max()))
        if residual <= opts.tol:
            break
        if residual > previous:
            damping = max(damping / 2.0, opts.min_damping)
        previous = residual
        w = w * (1.0 + damping * ex_l)
        r = r * (1.0 + damping * ex_k)
    else:
        if np.abs(ex_l).max() >= np.abs(ex_k).max():
            d = int(np.argmax(np.abs(ex_l)))
            worst = {"market": "labor", "region": e.regions[d], "excess": float(ex_l[d])}
        else:
            d = int(np.argmax(np.abs(ex_k)))
            worst = {"market": "capital", "region": e.regions[d], "excess": float(ex_k[d])}
        log_event(opts.devlog, "solve_end", {"period": st.period, "iterations": opts.max_iter,
                                             "residual": residual, "converged": False})
        raise NoConvergence(opts.max_iter, residual, worst, st.period)

    inv_spend = e.savings_rate * Y - TB
    if np.any(inv_spend < -1e-12 * np.abs(Y)):
        d = int(np.argmin(inv_spend))
        raise NegativeInvestment(f"Negative investment in period {st.period}",
                                 [{"region": e.regions[d], "investment": float(inv_spend[d])}])
    consumption = (1.0 - e.savings_rate)[:, None] * e.kappa * Y[:, None]
    _, pc = consumer_demand(Y, e.savings_rate, e.kappa, p)
    p_in = (e.chi * p).sum(axis=1)
    Pi = X / (1.0 + theta)[None, :]
    T = Y - F - Pi.sum(axis=1)
    interm = np.einsum("di,dij->dj", cost * sm, inputs)
    log_event(opts.devlog, "solve_end", {"period": st.period, "iterations": it, "residual": residual,
                                         "converged": True})
    return EquilibriumSolution(
        regions=e.regions, sectors=e.sectors,
        wages=w, rents=r, unit_costs=c, prices=p, landed=x, shares=pi,
        expenditure=E, consumption=consumption, investment_spend=chi_spend * inv_spend[:, None],
        intermediate_spend=interm, sales=X, profits=Pi, factor_income=F, transfers=T, income=Y,
        trade_balance=TB, consumer_price=pc, investment_price=p_in, investment=inv_spend / p_in,
        labor=l.copy(), capital=k.copy(), iterations=it, residual=residual, period=st.period,
        tariff_factors=np.asarray(pol.tm),
    )


def flows_from_solution(e: Economy, sol: EquilibriumSolution, pol: Optional[PolicyInputs] = None) -> BaselineFlows:
    """Value flows implied by an equilibrium, in the BaselineFlows layout."""
    pol = pol or base_policy(e)
    theta = e.theta
    sf, sm, sl, sk, inputs = _cost_split(e, sol.prices, sol.wages, sol.rents)
    cost = sol.sales * (theta / (1.0 + theta))[None, :]
    buyer = sol.shares * sol.expenditure[None, :, :]
    factors = np.stack([cost * sf * sl, cost * sf * sk, sol.profits], axis=-1)
    return BaselineFlows(
        regions=e.regions, sectors=e.sectors,
        trade=buyer / pol.tm,
        tariffs=buyer * (1.0 - 1.0 / pol.tm),
        factors=factors,
        intermediates=(cost * sm)[:, :, None] * inputs,
        consumption=sol.consumption,
        investment=sol.investment_spend,
    )
