"""Line-delimited JSON and CSV report writers.

Columns follow the field order of the record NamedTuple, so every file of a
given report kind has the same header. NaN (skipped benchmark points) is
written as ``null`` / an empty cell.
"""

import csv
import json
import math
from pathlib import Path
from typing import Any, Literal, NamedTuple, Sequence, TextIO

import numpy as np

from hlm.errors import ContractError
from hlm.evaluation import CosineSummary

ReportFormat = Literal["csv", "jsonl"]


class HistogramRow(NamedTuple):
    bin_low: float
    bin_high: float
    count: int


def _clean(value: Any) -> Any:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def rows_of(records: Sequence[NamedTuple]) -> tuple[list[str], list[list[Any]]]:
    if not records:
        raise ContractError("nothing to report")
    fields = list(records[0]._fields)
    for r in records:
        if list(r._fields) != fields:
            raise ContractError("cannot mix report kinds in one file")
    return fields, [[_clean(v) for v in r] for r in records]


def write_report(records: Sequence[NamedTuple], out: TextIO, fmt: ReportFormat) -> None:
    fields, rows = rows_of(records)
    if fmt == "jsonl":
        for row in rows:
            out.write(json.dumps(dict(zip(fields, row))) + "\n")
        return
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(fields)
    writer.writerows(["" if v is None else v for v in row] for row in rows)


def save_report(records: Sequence[NamedTuple], path: Path, fmt: ReportFormat) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        write_report(records, f, fmt)
    return path


def histogram_rows(summary: CosineSummary) -> list[HistogramRow]:
    edges = summary.bin_edges
    return [
        HistogramRow(float(edges[i]), float(edges[i + 1]), int(c))
        for i, c in enumerate(summary.histogram)
    ]
