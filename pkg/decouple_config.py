"""
Run configuration, schema validation and filesystem helpers shared by every
decouple-sim module.

State (session log, devlogs) lives under $DECOUPLE_SIM_HOME or ~/.decouple-sim.
Thread count comes from $DECOUPLE_SIM_THREADS, else the physical core count.
"""

from __future__ import annotations

import json
import os
import datetime
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, Optional

import psutil
from jsonschema import Draft7Validator

from decouple_errors import IoFailure, UsageError

HOME_ENV = "DECOUPLE_SIM_HOME"
THREADS_ENV = "DECOUPLE_SIM_THREADS"

REPO_DIR = Path(__file__).resolve().parent
SCHEMA_DIR = REPO_DIR / "schemas"
DATA_DIR = REPO_DIR / "data"


def state_dir() -> Path:
    raw = os.environ.get(HOME_ENV)
    if raw:
        return Path(raw).expanduser()
    return Path.home() / ".decouple-sim"


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
        if n < 1:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
        return n
    try:
        n = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    except Exception:
        n = 1
    return max(1, int(n))


def atomic_write_text(path: Path, text: str) -> Path:
    """Write via a sibling .tmp file and rename, so readers never see a partial file."""
    path = Path(path).expanduser()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"Cannot create directory {path.parent}: {e}")
    temp_path = path.with_name(path.name + ".tmp")
    try:
        with open(temp_path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        temp_path.replace(path)
    except OSError as e:
        if temp_path.exists():
            try:
                temp_path.unlink()
            except OSError:
                pass
        raise IoFailure(f"Failed to write {path}: {e}")
    return path


def write_json(path: Path, payload: Any) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=False) + "\n")


def read_json(path: Path) -> Any:
    path = Path(path).expanduser()
    if not path.exists():
        raise UsageError(f"File not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise IoFailure(f"Invalid JSON in {path}: {e}", [{"file": str(path), "line": e.lineno, "column": e.colno}])


def load_schema(name: str) -> Dict[str, Any]:
    return json.loads((SCHEMA_DIR / f"{name}.schema.json").read_text(encoding="utf-8"))


def validate_document(document: Any, schema_name: str, source: str = "<document>") -> None:
    """Raise IoFailure listing every schema violation (path + message)."""
    validator = Draft7Validator(load_schema(schema_name))
    errors = sorted(validator.iter_errors(document), key=lambda err: list(err.absolute_path))
    if errors:
        cells = [
            {"path": "/".join(str(p) for p in err.absolute_path) or "<root>", "error": err.message}
            for err in errors
        ]
        raise IoFailure(f"{source} does not match the {schema_name} schema", cells)


@dataclass
class SolverSettings:
    tol: float = 1e-8
    max_iter: int = 10000
    damping: float = 0.5
    inner_tol: float = 1e-10
    inner_max_iter: int = 10000


@dataclass
class RunConfig:
    economy: Optional[str] = None
    flows: Optional[str] = None
    params: Optional[str] = None
    scenario: Optional[str] = None
    historical: Optional[str] = None
    productivity: Optional[str] = None
    votes: Optional[str] = None
    labor: Optional[str] = None
    output_dir: str = "decouple-out"
    solver: SolverSettings = field(default_factory=SolverSettings)
    seed: int = 12345
    verbosity: int = 0
    threads: Optional[int] = None

    def workers(self) -> int:
        return self.threads if self.threads else default_workers()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def check_paths(self) -> None:
        missing = []
        for key in ("economy", "flows", "params", "scenario", "historical", "productivity", "votes", "labor"):
            value = getattr(self, key)
            if value and not Path(value).expanduser().exists() and not _is_preset_name(key, value):
                missing.append({"field": key, "path": value})
        if missing:
            raise UsageError("Referenced input file(s) do not exist", missing)


def _is_preset_name(key: str, value: str) -> bool:
    return key == "scenario" and not value.endswith(".json") and "/" not in value


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        data = read_json(path)
        validate_document(data, "run_config", str(path))
    solver = SolverSettings(**data.pop("solver", {}))
    cfg = RunConfig(solver=solver, **data)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if hasattr(cfg.solver, key):
            setattr(cfg.solver, key, value)
        else:
            setattr(cfg, key, value)
    if cfg.solver.tol <= 0 or cfg.solver.inner_tol <= 0:
        raise UsageError("Solver tolerances must be positive")
    if cfg.solver.max_iter < 1:
        raise UsageError("max_iter must be at least 1")
    return cfg


def timestamp() -> str:
    return datetime.datetime.now().strftime("%Y%m%d%H%M%S")
