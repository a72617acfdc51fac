"""Tests for the CSV and JSONL report writers."""

import io
import json
import math

import numpy as np
import pytest

from hlm.bench import BenchPoint
from hlm.errors import ContractError
from hlm.evaluation import EvalReport, synonym_cosine
from hlm.reports import histogram_rows, save_report, write_report


def test_csv_columns_follow_record_fields():
    out = io.StringIO()
    write_report([EvalReport("perplexity", 12.5, 100, 0.3, "abc")], out, "csv")
    assert out.getvalue() == (
        "metric,value,n_examples,half_width,checkpoint_digest\nperplexity,12.5,100,0.3,abc\n"
    )


def test_nan_is_written_as_null():
    point = BenchPoint("vanilla_ce", 50000, 256, 128, 16, math.nan, math.nan, 0, 0, False, True)
    out = io.StringIO()
    write_report([point], out, "jsonl")
    row = json.loads(out.getvalue())
    assert row["median_s"] is None and row["skipped"] is True
    assert list(row) == list(BenchPoint._fields)

    out = io.StringIO()
    write_report([point], out, "csv")
    assert out.getvalue().splitlines()[1] == "vanilla_ce,50000,256,128,16,,,0,0,False,True"


def test_numpy_scalars_are_plain(temp_dir):
    summary = synonym_cosine(np.eye(3), [(0, 1)])
    path = save_report(histogram_rows(summary), temp_dir / "r" / "hist.jsonl", "jsonl")
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == len(summary.histogram)
    assert sum(r["count"] for r in rows) == 1
    assert rows[0]["bin_low"] == -1.0 and rows[-1]["bin_high"] == 1.0


def test_empty_or_mixed_records():
    with pytest.raises(ContractError):
        write_report([], io.StringIO(), "csv")
    point = BenchPoint("x", 1, 1, 1, 1, 0.0, 0.0, 0, 0, False)
    with pytest.raises(ContractError):
        write_report([EvalReport("m", 0.0, 1, 0.0), point], io.StringIO(), "jsonl")
