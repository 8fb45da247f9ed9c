"""Run records and deterministic result files.

Every scenario reduces to a list of named checks (value, standard error,
bound, pass/fail).  CSV and JSON writers format floats with 17 significant
digits, so identical configurations produce byte-identical files apart from
the wall-clock field in the JSON summary.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError

__all__ = [
    "CheckRecord",
    "RunReport",
    "format_float",
    "json_dumps_17g",
    "write_csv",
    "write_json",
    "emit_report",
]


def format_float(x: float) -> str:
    """17 significant digits; round-trips every double exactly."""
    if x != x:
        return "nan"
    if x == float("inf"):
        return "inf"
    if x == float("-inf"):
        return "-inf"
    return f"{x:.17g}"


def _json_value(obj, indent, level) -> str:
    pad = " " * (indent * (level + 1))
    closing = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            f'{pad}"{key}": {_json_value(obj[key], indent, level + 1)}'
            for key in obj
        ]
        return "{\n" + ",\n".join(items) + "\n" + closing + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        items = [f"{pad}{_json_value(v, indent, level + 1)}" for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + closing + "]"
    if isinstance(obj, bool) or isinstance(obj, np.bool_):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if x != x or x in (float("inf"), float("-inf")):
            return f'"{format_float(x)}"'
        return format_float(x)
    text = str(obj).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{text}"'


def json_dumps_17g(obj) -> str:
    """JSON with floats rendered at 17 significant digits, keys kept in order."""
    return _json_value(obj, indent=2, level=0) + "\n"


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json_dumps_17g(obj))


def write_csv(path, header: Sequence[str], rows, config_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [
                format_float(float(v)) if isinstance(v, (float, np.floating))
                else str(v)
                for v in row
            ]
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class CheckRecord:
    """One named quantity with its acceptance verdict."""

    name: str
    value: float
    passed: bool
    std_error: Optional[float] = None
    bound: Optional[float] = None
    note: str = ""

    def to_dict(self) -> dict:
        out = {"name": self.name, "value": float(self.value), "passed": bool(self.passed)}
        if self.std_error is not None:
            out["std_error"] = float(self.std_error)
        if self.bound is not None:
            out["bound"] = float(self.bound)
        if self.note:
            out["note"] = self.note
        return out


@dataclass
class RunReport:
    """Everything one scenario produced."""

    scenario: str
    config_hash: str
    master_seed: int
    records: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def add(self, *args, **kwargs) -> CheckRecord:
        rec = CheckRecord(*args, **kwargs)
        self.records.append(rec)
        return rec

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "passed": self.passed,
            "records": [r.to_dict() for r in self.records],
            "outputs": list(self.outputs),
            "metadata": dict(self.metadata),
            "wall_clock_s": float(self.wall_clock_s),
        }


def _table(reports) -> str:
    lines = [
        "| scenario | check | value | std error | bound | status |",
        "|---|---|---|---|---|---|",
    ]
    for rep in reports:
        for rec in rep.records:
            se = format_float(rec.std_error) if rec.std_error is not None else ""
            bd = format_float(rec.bound) if rec.bound is not None else ""
            status = "pass" if rec.passed else "FAIL"
            lines.append(
                f"| {rep.scenario} | {rec.name} | {format_float(rec.value)} "
                f"| {se} | {bd} | {status} |"
            )
    return "\n".join(lines) + "\n"


def emit_report(reports, outdir) -> int:
    """Human-readable summary plus machine JSON; returns the exit code.

    Raises on an empty report list; a silent empty summary would hide a
    scenario that produced nothing.
    """
    reports = list(reports)
    if not reports or any(not rep.records for rep in reports):
        raise ConfigError("refusing to emit a report with no quantities")
    os.makedirs(outdir, exist_ok=True)
    failed = [
        f"{rep.scenario}:{rec.name}"
        for rep in reports
        for rec in rep.records
        if not rec.passed
    ]
    md_path = os.path.join(outdir, "summary.md")
    with open(md_path, "w", encoding="utf-8") as fh:
        fh.write("# mflab run summary\n\n")
        fh.write(_table(reports))
        fh.write("\n")
        if failed:
            fh.write("Failing checks: " + ", ".join(failed) + "\n")
        else:
            fh.write("All checks passed.\n")
    write_json(
        os.path.join(outdir, "summary.json"),
        {
            "passed": not failed,
            "failing": failed,
            "reports": [rep.to_dict() for rep in reports],
        },
    )
    return 0 if not failed else 1
