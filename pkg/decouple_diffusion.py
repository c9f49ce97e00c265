"""
Diffusion-optimal sourcing versus market sourcing for one destination.

A destination learns from its suppliers in proportion to Σ_j η[i, j] Σ_s π[s, j]^(1−β) λ[s, j]^β.
The diffusion-maximizing shares are λ/Σλ in every supplying sector; the market
allocates λ x̃^(−θ)/Φ. ℵ compares the two across a pair of sectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from decouple_config import atomic_write_text, read_json
from decouple_economy import Economy, StateVector
from decouple_equilibrium import EquilibriumSolution
from decouple_errors import IoFailure, UsageError


@dataclass(frozen=True)
class DiffusionProblem:
    lam: np.ndarray        # (N, J) supplier productivity
    eta: np.ndarray        # (I, J) input cost shares of the destination's using sectors
    landed: np.ndarray     # (N, J) landed cost into the destination
    theta: np.ndarray      # (J,)
    beta: float
    destination: int = 0
    regions: Tuple[str, ...] = ()
    sectors: Tuple[str, ...] = ()

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        if lam.shape[0] == 1 and np.ndim(self.lam) == 1:
            lam = lam.T
        landed = np.asarray(self.landed, dtype=float).reshape(lam.shape)
        eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        theta = np.broadcast_to(np.asarray(self.theta, dtype=float), (lam.shape[1],)).copy()
        problems = []
        if np.any(lam < 0) or not np.any(lam > 0):
            problems.append({"field": "lam", "min": float(lam.min())})
        if np.any(landed <= 0):
            problems.append({"field": "landed", "min": float(landed.min())})
        if eta.shape[1] != lam.shape[1] or np.any(np.abs(eta.sum(axis=1) - 1.0) > 1e-6):
            problems.append({"field": "eta", "shape": str(eta.shape)})
        if not 0 <= self.beta < 1:
            problems.append({"field": "beta", "value": float(self.beta)})
        if problems:
            raise UsageError("Invalid diffusion problem", problems)
        for name, value in (("lam", lam), ("landed", landed), ("eta", eta), ("theta", theta)):
            object.__setattr__(self, name, value)
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "regions", tuple(self.regions) or tuple(f"r{k}" for k in range(lam.shape[0])))
        object.__setattr__(self, "sectors", tuple(self.sectors) or tuple(f"s{k}" for k in range(lam.shape[1])))

    @property
    def n_sources(self) -> int:
        return self.lam.shape[0]

    @property
    def n_sectors(self) -> int:
        return self.lam.shape[1]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DiffusionProblem":
        try:
            return cls(lam=data["lam"], eta=data["eta"], landed=data["landed"], theta=data["theta"],
                       beta=data["beta"], destination=int(data.get("destination", 0)),
                       regions=tuple(data.get("regions", ())), sectors=tuple(data.get("sectors", ())))
        except KeyError as e:
            raise IoFailure(f"Diffusion problem lacks field {e}")

    def to_dict(self) -> Dict[str, Any]:
        return {"lam": self.lam.tolist(), "eta": self.eta.tolist(), "landed": self.landed.tolist(),
                "theta": self.theta.tolist(), "beta": self.beta, "destination": self.destination,
                "regions": list(self.regions), "sectors": list(self.sectors)}


def problem_from_solution(e: Economy, st: StateVector, sol: EquilibriumSolution,
                          destination: str) -> DiffusionProblem:
    d = e.region_index(destination)
    return DiffusionProblem(lam=st.lam, eta=e.eta[d], landed=sol.landed[:, d, :], theta=e.theta, beta=e.beta,
                            destination=d, regions=e.regions, sectors=e.sectors)


def load_problem(path: Path) -> DiffusionProblem:
    return DiffusionProblem.from_dict(read_json(path))


def diffusion_value(pi: Any, problem: DiffusionProblem, sector: int = 0) -> float:
    """Σ_j η[i, j] Σ_s π[s, j]^(1−β) λ[s, j]^β for using sector i = `sector`."""
    pi = np.asarray(pi, dtype=float).reshape(problem.lam.shape)
    beta = problem.beta
    per_input = (pi ** (1.0 - beta) * problem.lam ** beta).sum(axis=0)
    return float(problem.eta[sector] @ per_input)


def optimal_shares(problem: DiffusionProblem) -> np.ndarray:
    return problem.lam / problem.lam.sum(axis=0, keepdims=True)


def actual_shares(problem: DiffusionProblem) -> np.ndarray:
    terms = problem.lam * problem.landed ** (-problem.theta[None, :])
    return terms / terms.sum(axis=0, keepdims=True)


def aleph(problem: DiffusionProblem, sector: int, other: int, source: Optional[int] = None,
          partner: Optional[int] = None) -> float:
    """
    Actual over diffusion-optimal ratio of the expenditure share on `source` in `sector`
    to the share on `partner` in `other`. Both default to the destination itself.
    """
    s = problem.destination if source is None else source
    n = problem.destination if partner is None else partner
    th = problem.theta
    lam_sum = problem.lam.sum(axis=0)
    phi = (problem.lam * problem.landed ** (-th[None, :])).sum(axis=0)
    gap_j = problem.landed[s, sector] ** (-th[sector]) * lam_sum[sector] / phi[sector]
    gap_p = problem.landed[n, other] ** (-th[other]) * lam_sum[other] / phi[other]
    return float(gap_j / gap_p)


def aleph_two_by_two(x_home: Sequence[float], x_foreign: Sequence[float], tau: Sequence[float],
                     lam_home: Sequence[float], lam_foreign: Sequence[float], theta: float) -> float:
    """
    Home-versus-foreign two-sector form. Each argument is a (sector i, sector −i) pair of
    unit costs, iceberg costs or productivities.
    """
    xh, xf, t = np.asarray(x_home, float), np.asarray(x_foreign, float), np.asarray(tau, float)
    lh, lf = np.asarray(lam_home, float), np.asarray(lam_foreign, float)
    domestic_gap = (xh[0] / xh[1]) ** (-theta)
    deviation = (lh * xh ** (-theta) + lf * (t * xf) ** (-theta)) / (lh + lf)
    return float(domestic_gap / deviation[0] * deviation[1])


@dataclass
class SurfaceData:
    own: np.ndarray            # home share in the sector's own input, x axis
    cross: np.ndarray          # home share in the other input, y axis
    values: np.ndarray         # (len(own), len(cross))
    points: Dict[str, Tuple[float, float, float]] = field(default_factory=dict)

    @property
    def maximum(self) -> float:
        return float(self.values.max())

    def to_frame(self) -> pd.DataFrame:
        xx, yy = np.meshgrid(self.own, self.cross, indexing="ij")
        return pd.DataFrame({"x": xx.ravel(), "y": yy.ravel(), "value": self.values.ravel()})

    def points_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"point": k, "x": v[0], "y": v[1], "value": v[2]} for k, v in self.points.items()])

    def write(self, directory: Path) -> Tuple[Path, Path]:
        directory = Path(directory)
        grid = atomic_write_text(directory / "surface.csv",
                                 self.to_frame().to_csv(index=False, float_format="%.17g", lineterminator="\n"))
        marks = atomic_write_text(directory / "surface_points.csv",
                                  self.points_frame().to_csv(index=False, float_format="%.17g", lineterminator="\n"))
        return grid, marks


def figure_surface(problem: DiffusionProblem, resolution: int = 101, sector: int = 0) -> SurfaceData:
    """Tabulate the diffusion value of using sector `sector` over both home shares."""
    if problem.n_sources != 2 or problem.n_sectors != 2:
        raise UsageError("figure_surface needs exactly 2 regions and 2 sectors",
                         [{"regions": problem.n_sources, "sectors": problem.n_sectors}])
    if resolution < 2:
        raise UsageError("Surface resolution must be at least 2")
    h = problem.destination
    f = 1 - h
    i, other = sector, 1 - sector
    grid = np.linspace(0.0, 1.0, resolution)
    beta = problem.beta
    lam = problem.lam

    def learned(share: np.ndarray, j: int) -> np.ndarray:
        return share ** (1.0 - beta) * lam[h, j] ** beta + (1.0 - share) ** (1.0 - beta) * lam[f, j] ** beta

    eta = problem.eta[sector]
    values = eta[i] * learned(grid, i)[:, None] + eta[other] * learned(grid, other)[None, :]

    def mark(shares: np.ndarray) -> Tuple[float, float, float]:
        return float(shares[h, i]), float(shares[h, other]), diffusion_value(shares, problem, sector)

    autarky = np.zeros_like(lam)
    autarky[h] = 1.0
    return SurfaceData(own=grid, cross=grid, values=values, points={
        "optimal": mark(optimal_shares(problem)),
        "actual": mark(actual_shares(problem)),
        "autarky": mark(autarky),
    })


def summarize(problem: DiffusionProblem, sector: int = 0, other: Optional[int] = None) -> Dict[str, Any]:
    """Everything `analyze-diffusion` prints for one problem."""
    opt, act = optimal_shares(problem), actual_shares(problem)
    out: Dict[str, Any] = {
        "optimal_shares": opt.tolist(),
        "actual_shares": act.tolist(),
        "value_optimal": diffusion_value(opt, problem, sector),
        "value_actual": diffusion_value(act, problem, sector),
    }
    if problem.n_sectors > 1:
        other = (1 - sector if sector < 2 else 0) if other is None else other
        out["aleph"] = aleph(problem, sector, other)
    return out


def write_summary(summary: Mapping[str, Any], path: Path) -> Path:
    return atomic_write_text(Path(path), json.dumps(summary, indent=2) + "\n")
