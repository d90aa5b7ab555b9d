"""Append-only CSV metrics with the run configuration echoed in the header."""
from __future__ import annotations

import csv
import math
from pathlib import Path

from .config import RunConfig


class MetricsWriter:
    """Writes ``# key = value`` config lines, a header row, then one record per line.

    Columns are fixed at construction; missing values are written empty and
    unknown keys are rejected so the schema stays stable within a file.
    """

    def __init__(self, path, config: RunConfig, columns: list[str]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.columns = ["step", *columns, "config_hash"]
        self.config_hash = config.hash()
        self.last_step = -math.inf
        self.rows: list[dict] = []
        with open(self.path, "w", newline="") as fh:
            for line in config.to_text().splitlines():
                fh.write(f"# {line}\n")
            csv.writer(fh).writerow(self.columns)

    def write(self, step: int, **values) -> dict:
        if step < self.last_step:
            raise ValueError(f"metrics step went backwards: {step} < {self.last_step}")
        extra = set(values) - set(self.columns)
        if extra:
            raise KeyError(f"unknown metric columns {sorted(extra)}")
        self.last_step = step
        row = {"step": step, **values, "config_hash": self.config_hash}
        self.rows.append(row)
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c)) for c in self.columns])
        return row


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def read_metrics(path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """(config echo, rows) from a metrics CSV."""
    config, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            config[key.strip()] = val.strip()
        else:
            body.append(line)
    return config, list(csv.DictReader(body))
