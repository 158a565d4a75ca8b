"""Line-delimited metrics records.

Each line is one self-contained JSON object carrying ``schema: 1``. Floats
serialize at full round-trip precision. A truncated final line is reported
with its line number while every earlier record stays readable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

METRICS_SCHEMA = 1


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReadResult:
    records: list[dict]
    truncated_line: int | None = None


class MetricsWriter:
    """Single writer per run; one flushed line per record."""

    def __init__(self, path, run_id: str, seed: int):
        self.path = path
        self.run_id = run_id
        self.seed = seed
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, record: dict):
        row = {"schema": METRICS_SCHEMA, "run_id": self.run_id, "seed": self.seed}
        row.update(record)
        try:
            line = json.dumps(row, allow_nan=True)
        except (TypeError, ValueError) as exc:
            raise MetricsError(f"unserializable record: {exc}") from exc
        self._fh.write(line + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(path) -> MetricsReadResult:
    """Parse a metrics file; a torn final line is reported, not fatal."""
    records: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            record = json.loads(stripped)
        except json.JSONDecodeError as exc:
            if lineno == len(lines):
                return MetricsReadResult(records=records, truncated_line=lineno)
            raise MetricsError(f"line {lineno}: unparseable record") from exc
        if record.get("schema") != METRICS_SCHEMA:
            raise MetricsError(
                f"line {lineno}: unsupported schema {record.get('schema')!r}"
            )
        records.append(record)
    return MetricsReadResult(records=records)
