"""Result tables, acceptance checks and on-disk output."""

from __future__ import annotations

import math
import os
import platform
from dataclasses import dataclass, field

import numpy as np

from .. import __version__


@dataclass
class ResultTable:
    """Rectangular table; ``key`` columns define the (sorted) row order."""

    name: str
    columns: list[str]
    key: list[str] = field(default_factory=list)
    rows: list[tuple] = field(default_factory=list)

    def add(self, **values) -> None:
        missing = set(self.columns) ^ set(values)
        if missing:
            raise ValueError(f"table {self.name}: column mismatch {sorted(missing)}")
        self.rows.append(tuple(values[c] for c in self.columns))

    def extend(self, other: ResultTable) -> None:
        if other.columns != self.columns:
            raise ValueError(f"cannot merge tables with different columns into {self.name}")
        self.rows.extend(other.rows)

    def sorted_rows(self) -> list[tuple]:
        idx = [self.columns.index(k) for k in self.key]
        return sorted(self.rows, key=lambda r: tuple(r[i] for i in idx))

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.sorted_rows()])

    def where(self, **match) -> list[dict]:
        out = []
        for r in self.sorted_rows():
            d = dict(zip(self.columns, r))
            if all(d[k] == v for k, v in match.items()):
                out.append(d)
        return out

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for r in self.sorted_rows():
            lines.append(",".join(format_value(v) for v in r))
        return "\n".join(lines) + "\n"


def format_value(v) -> str:
    """Locale-free formatting; floats with 17 significant digits, NaN as ``nan``."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        x = float(v)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".17g")
    s = str(v)
    if "," in s or "\n" in s:
        raise ValueError(f"string cell {s!r} would break the CSV layout")
    return s


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ExperimentResult:
    tables: dict[str, ResultTable]
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def write_outputs(result: ExperimentResult, cfg, out_dir: str, wall_time: float) -> list[str]:
    """Write one CSV per table, the resolved config and a manifest; return the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, table in sorted(result.tables.items()):
        path = os.path.join(out_dir, f"{name}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(table.to_csv())
        paths.append(path)
    cfg_path = os.path.join(out_dir, "config.ini")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_ini())
    paths.append(cfg_path)
    manifest = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_time_s": f"{wall_time:.3f}",
        "checks_passed": str(result.passed).lower(),
    }
    for c in result.checks:
        manifest[f"check.{c.name}"] = ("pass" if c.passed else "FAIL") + (f" ({c.detail})" if c.detail else "")
    man_path = os.path.join(out_dir, "manifest.txt")
    with open(man_path, "w", encoding="utf-8") as fh:
        for k, v in manifest.items():
            fh.write(f"{k} = {v}\n")
    paths.append(man_path)
    return paths
