"""Experiment reports: metric tables with uncertainties, named pass/fail flags,
provenance, and their JSON / CSV serialization."""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import __version__, _kernels


@dataclass
class MetricTable:
    """Rows of numbers under named columns; one CSV file per table."""

    columns: tuple
    rows: list = field(default_factory=list)

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(tuple(values))

    def column(self, name) -> np.ndarray:
        k = self.columns.index(name)
        return np.array([r[k] for r in self.rows], dtype=float)

    def to_csv_text(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(_cell(v) for v in row))
        return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


@dataclass(frozen=True)
class Flag:
    """Outcome of one acceptance rule; ``passed`` is None when not applicable."""

    criterion: str
    passed: Optional[bool]
    detail: str = ""


@dataclass
class ExperimentReport:
    experiment: str
    config_text: str
    metrics: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def table(self, name, columns) -> MetricTable:
        if name not in self.metrics:
            self.metrics[name] = MetricTable(tuple(columns))
        return self.metrics[name]

    def scalar(self, name, value, stderr) -> None:
        """Record a named summary value with its uncertainty."""
        self.table("summary", ("metric", "value", "stderr")).add(name, float(value), float(stderr))

    def summary(self) -> dict:
        t = self.metrics.get("summary")
        return {} if t is None else {r[0]: (r[1], r[2]) for r in t.rows}

    def flag(self, name, criterion, passed, detail="") -> None:
        self.flags[name] = Flag(criterion, None if passed is None else bool(passed), detail)

    @property
    def passed(self) -> bool:
        return all(f.passed is not False for f in self.flags.values())

    def exit_code(self) -> int:
        return 0 if self.passed else 2

    def to_json(self) -> dict:
        return {
            "experiment": self.experiment,
            "passed": self.passed,
            "flags": {k: {"criterion": f.criterion, "passed": f.passed, "detail": f.detail}
                      for k, f in self.flags.items()},
            "metrics": {k: {"columns": list(t.columns), "rows": [[_json_num(v) for v in r] for r in t.rows]}
                        for k, t in self.metrics.items()},
            "provenance": self.provenance,
            "config": self.config_text,
            "wall_seconds": self.wall_seconds,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        }

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, t in self.metrics.items():
            (out / f"{name}.csv").write_text(t.to_csv_text(), encoding="utf-8")
        path = out / "report.json"
        path.write_text(json.dumps(self.to_json(), indent=2, allow_nan=True) + "\n", encoding="utf-8")
        return path


def _json_num(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


def provenance(config) -> dict:
    return {"seed": int(config.seed), "config_hash": config.digest(), "version": __version__,
            "backend": _kernels.BACKEND}
