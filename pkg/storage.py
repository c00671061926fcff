# storage.py
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import Config

log = logging.getLogger("store")

RESOLVED_NAME = "config.resolved"
STATE_NAME = "run.json"
METRICS_NAME = "metrics.json"
MODEL_NAME = "model.ungw"


def run_id_for(command: str, config: Config) -> str:
    digest = hashlib.sha256(config.dump().encode("utf-8")).hexdigest()
    return f"{command}-{digest[:10]}"


@dataclass
class RunStore:
    """One output directory per run: out/<run-id>/."""
    path: Path
    _state: Dict[str, Any]

    @classmethod
    def load(cls, path: Path) -> "RunStore":
        state_file = path / STATE_NAME
        if not state_file.exists():
            return cls(path=path, _state={})
        try:
            data = json.loads(state_file.read_text(encoding="utf-8"))
            if not isinstance(data, dict):
                data = {}
        except Exception:
            data = {}
        return cls(path=path, _state=data)

    @classmethod
    def open(cls, command: str, config: Config) -> "RunStore":
        """Create (or reopen) the run directory and echo the resolved config into it."""
        run_id = config["out.run_id"] or run_id_for(command, config)
        path = Path(config["out.dir"]) / run_id
        path.mkdir(parents=True, exist_ok=True)
        (path / RESOLVED_NAME).write_text(config.dump(), encoding="utf-8")

        store = cls.load(path)
        previous = store.get_status()
        if previous:
            log.info(f"reopening {run_id} (last status: {previous})")
        store._state["command"] = command
        store._state["run_id"] = run_id
        store.save()
        log.info(f"using run directory: {path}")
        return store

    def save(self) -> None:
        (self.path / STATE_NAME).write_text(
            json.dumps(self._state, indent=2, sort_keys=True), encoding="utf-8"
        )

    # -------------------------
    # Paths
    # -------------------------
    @property
    def run_id(self) -> str:
        return str(self._state.get("run_id") or self.path.name)

    @property
    def model_path(self) -> Path:
        return self.path / MODEL_NAME

    @property
    def report_json(self) -> Path:
        return self.path / "report.json"

    # -------------------------
    # Run status
    # -------------------------
    def set_status(self, status: str) -> None:
        self._state["status"] = status
        self.save()

    def get_status(self) -> Optional[str]:
        val = self._state.get("status")
        return val if isinstance(val, str) else None

    def set_cell_errors(self, errors: List[Dict[str, str]]) -> None:
        self._state["cell_errors"] = list(errors)
        self.save()

    def get_cell_errors(self) -> List[Dict[str, str]]:
        errors = self._state.get("cell_errors", [])
        if not isinstance(errors, list):
            return []
        return [e for e in errors if isinstance(e, dict)]

    # -------------------------
    # Metrics
    # -------------------------
    def write_metrics_line(self, record: Dict[str, Any]) -> str:
        line = json.dumps(record, sort_keys=True)
        (self.path / METRICS_NAME).write_text(line + "\n", encoding="utf-8")
        self._state["metrics"] = record
        self.save()
        return line
