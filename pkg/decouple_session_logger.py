import json
import sys
import time
from pathlib import Path
from typing import Optional, Dict, Any

from decouple_config import state_dir


class SessionLogger:
    """
    Command timeline for decouple-sim runs.
    Writes JSONL to <state>/session.jsonl with size-based rotation.
    """

    def __init__(self, log_name: str = "session.jsonl", max_size_mb: int = 5, home: Optional[Path] = None):
        self.log_path = (home or state_dir()) / log_name
        self.max_size = max_size_mb * 1024 * 1024
        try:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
        except Exception:
            # Read-only homes must not stop a simulation.
            pass

    def _rotate_if_needed(self):
        if self.log_path.exists() and self.log_path.stat().st_size > self.max_size:
            backup = self.log_path.with_suffix(".jsonl.old")
            if backup.exists():
                backup.unlink()
            self.log_path.rename(backup)

    def log(self, level: str, message: str, suggestion: Optional[str] = None, metadata: Optional[Dict[str, Any]] = None):
        """
        Append one entry.
        Levels: INFO, WARNING, ERROR, COMMAND, SOLVER
        """
        try:
            self._rotate_if_needed()
        except Exception:
            return

        entry = {
            "timestamp": time.time(),
            "iso": time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime()),
            "level": level.upper(),
            "message": message,
            "suggestion": suggestion,
            "metadata": metadata or {}
        }

        try:
            with open(self.log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, default=str) + "\n")
        except Exception:
            return

    def log_warning(self, message: str, suggestion: Optional[str] = None, **metadata: Any):
        self.log("WARNING", message, suggestion=suggestion, metadata=metadata)

    def log_solver(self, period: Optional[int], iterations: int, residual: float):
        self.log("SOLVER", f"Static equilibrium solved (period {period})",
                 metadata={"period": period, "iterations": iterations, "residual": residual})

    def log_command(self, cmd: str, status: str, result: Optional[str] = None):
        """Log one CLI invocation."""
        self.log("COMMAND", f"Executed: {cmd}", suggestion=f"Status: {status}", metadata={"raw_result": result})


def get_session_logger() -> Optional[SessionLogger]:
    try:
        return SessionLogger()
    except Exception:
        return None


def warn(message: str, suggestion: Optional[str] = None, **metadata: Any) -> None:
    """Print a warning to stderr and record it in the session log."""
    print(f"⚠️  {message}", file=sys.stderr)
    logger = get_session_logger()
    if logger:
        logger.log_warning(message, suggestion=suggestion, **metadata)
