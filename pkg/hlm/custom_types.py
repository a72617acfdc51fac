from enum import Enum
from typing import Any

import typer
import yaml


class ReportFormatChoice(str, Enum):
    csv = "csv"
    jsonl = "jsonl"


class MetricChoice(str, Enum):
    perplexity = "perplexity"
    cloze = "cloze"
    retrieval_in_batch = "retrieval-in-batch"
    retrieval_full = "retrieval-full"
    cwt_literal = "cwt-literal"


def parse_override(value: str) -> tuple[str, Any]:
    """Parse ``key=value``; the value is read as a YAML scalar (``7`` -> int)."""
    key, sep, raw = value.partition("=")
    key = key.strip()
    if not sep or not key:
        raise typer.BadParameter(f"expected key=value, got '{value}'", param_hint="--set")
    if any(not part for part in key.split(".")):
        raise typer.BadParameter(f"invalid config key '{key}'", param_hint="--set")
    try:
        parsed = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as err:
        raise typer.BadParameter(f"cannot parse value for '{key}': {err}", param_hint="--set")
    return key, parsed


def parse_overrides(values: list[str] | None, seed: int | None = None) -> list[tuple[str, Any]]:
    """``--set`` pairs in order, then ``--seed`` which wins over ``--set seed=...``."""
    overrides = [parse_override(v) for v in values or []]
    if seed is not None:
        overrides.append(("seed", seed))
    return overrides
