"""
Domain errors for decouple-sim.

Every error carries the offending cells so the CLI can print them one per line,
and an exit code that cli_dispatch hands back to the shell.
"""

from __future__ import annotations

from typing import Any, Dict, List, Optional, Sequence


class SimulationError(ValueError):
    """Root of all domain errors (exit code 1)."""

    exit_code = 1

    def __init__(self, message: str, cells: Optional[Sequence[Dict[str, Any]]] = None):
        super().__init__(message)
        self.message = message
        self.cells: List[Dict[str, Any]] = list(cells or [])

    def describe_cells(self, limit: int = 20) -> List[str]:
        lines = []
        for cell in self.cells[:limit]:
            parts = [f"{k}={_fmt(v)}" for k, v in cell.items()]
            lines.append("   " + ", ".join(parts))
        if len(self.cells) > limit:
            lines.append(f"   ... {len(self.cells) - limit} more")
        return lines

    def __str__(self) -> str:
        if not self.cells:
            return self.message
        return "\n".join([self.message] + self.describe_cells())


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


class UsageError(SimulationError):
    """Bad invocation: missing files, malformed arguments (exit code 2)."""

    exit_code = 2


class ValidationFailed(SimulationError):
    def __init__(self, violations: Sequence[Any]):
        self.violations = list(violations)
        cells = [v.as_dict() for v in self.violations]
        super().__init__(f"{len(self.violations)} violation(s) in economy", cells)


class UnbalancedFlows(SimulationError):
    pass


class CalibrationError(SimulationError):
    pass


class NonPositivePrice(SimulationError):
    pass


class DivergentIndex(SimulationError):
    pass


class NegativeInvestment(SimulationError):
    pass


class NoConvergence(SimulationError):
    def __init__(self, iterations: int, residual: float, worst_cell: Optional[Dict[str, Any]] = None,
                 period: Optional[int] = None):
        self.iterations = iterations
        self.residual = residual
        self.worst_cell = worst_cell or {}
        self.period = period
        where = f" in period {period}" if period is not None else ""
        super().__init__(
            f"No convergence{where} after {iterations} iterations (residual {residual:.3e})",
            [self.worst_cell] if self.worst_cell else None,
        )

    def at_period(self, period: int) -> "NoConvergence":
        return NoConvergence(self.iterations, self.residual, self.worst_cell, period)


class NonPositiveState(SimulationError):
    pass


class InfeasibleTarget(SimulationError):
    pass


class MissingCell(SimulationError):
    pass


class DegenerateMarginals(SimulationError):
    pass


class UnknownRegion(SimulationError):
    pass


class ZeroBaseline(SimulationError):
    pass


class IoFailure(SimulationError):
    pass
