"""
Tab separated sensitivity and plan tables.

Header lines start with ``"# "``, the last header line names the columns.
Summary values are stored as ``"# key: value"`` header lines.
Floats are written with ``repr``, which is the shortest exact round-trip representation.

Column order
------------
sensitivity: layer_id, avg_trace, param_count (rows sorted by layer_id)
plan: layer_id, bits, avg_trace, params (rows sorted by layer_id)
"""

import json
from pathlib import Path
from typing import Any, Optional, Sequence, Union

from ..errors import ManifestError, PlanError
from ..quantization.hessian import SensitivityRecord
from ..quantization.planner import PrecisionPlan, average_bits


SENSITIVITY_COLUMNS = ("layer_id", "avg_trace", "param_count")
PLAN_COLUMNS = ("layer_id", "bits", "avg_trace", "params")


def _write_table(path: Union[str, Path], summary: dict[str, Any], columns: Sequence[str],
                 rows: Sequence[Sequence[Any]]) -> None:
    lines = [f"# {key}: {json.dumps(summary[key], sort_keys=True)}" for key in sorted(summary)]
    lines.append("# " + "\t".join(columns))
    for row in rows:
        lines.append("\t".join(repr(value) if isinstance(value, float) else str(value)
                               for value in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _read_table(path: Union[str, Path]) -> tuple[dict[str, Any], list[str], list[list[str]]]:
    header: list[str] = []
    rows = []
    with Path(path).open("r", encoding="utf-8") as file:
        for line in file:
            line = line.rstrip("\n")
            if line.startswith("# "):
                header.append(line[2:])
            elif line:
                rows.append(line.split("\t"))
    if not header:
        raise ManifestError(f"'{path}' has no column header.")
    columns = header[-1].split("\t")
    summary = {}
    for entry in header[:-1]:
        key, _, value = entry.partition(": ")
        try:
            summary[key] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"Invalid summary line '{entry}' in '{path}'.") from exc
    for row in rows:
        if len(row) != len(columns):
            raise ManifestError(f"Row {row} of '{path}' does not match columns {columns}.")
    return summary, columns, rows


def write_sensitivity_table(records: Sequence[SensitivityRecord], path: Union[str, Path],
                            summary: Optional[dict[str, Any]] = None) -> None:
    rows = [(record.layer_id, float(record.avg_trace), record.param_count)
            for record in sorted(records, key=lambda record: record.layer_id)]
    _write_table(path, summary or {}, SENSITIVITY_COLUMNS, rows)


def read_sensitivity_table(path: Union[str, Path]) -> list[SensitivityRecord]:
    _, columns, rows = _read_table(path)
    if tuple(columns) != SENSITIVITY_COLUMNS:
        raise ManifestError(f"'{path}' is not a sensitivity table, columns are {columns}.")
    try:
        return [SensitivityRecord(layer_id=row[0], avg_trace=float(row[1]),
                                  param_count=int(row[2])) for row in rows]
    except ValueError as exc:
        raise ManifestError(f"Invalid value in '{path}': {exc}") from exc


def write_plan_table(plan: PrecisionPlan, path: Union[str, Path]) -> None:
    traces = {record.layer_id: record.avg_trace for record in plan.ranking}
    rows = [
        (layer_id, bits, float(traces.get(layer_id, float("nan"))),
         plan.param_counts[layer_id])
        for layer_id, bits in sorted(plan.assignments.items())
    ]
    _write_table(path, plan.summary(), PLAN_COLUMNS, rows)


def read_plan_table(path: Union[str, Path]) -> PrecisionPlan:
    summary, columns, rows = _read_table(path)
    if tuple(columns) != PLAN_COLUMNS:
        raise ManifestError(f"'{path}' is not a plan table, columns are {columns}.")
    if not rows:
        raise PlanError(f"Plan '{path}' is empty.")
    try:
        assignments = {row[0]: int(row[1]) for row in rows}
        counts = {row[0]: int(row[3]) for row in rows}
        ranking = [SensitivityRecord(layer_id=row[0], avg_trace=float(row[2]),
                                     param_count=int(row[3]))
                   for row in rows if row[2] != "nan"]
    except ValueError as exc:
        raise ManifestError(f"Invalid value in '{path}': {exc}") from exc
    return PrecisionPlan(
        assignments=assignments,
        ratio_r=float(summary.get("target_ratio", 0.0)),
        achieved_avg_bits=average_bits(assignments, counts),
        ranking=sorted(ranking, key=lambda record: (-record.avg_trace, record.layer_id)),
        param_counts=counts,
        method=str(summary.get("method", "trace")),
    )
