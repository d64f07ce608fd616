"""Append-only JSON-lines metrics stream plus an end-of-run summary file.

Every line parses on its own, so any prefix of a stream is valid input to
downstream analysis.  The first line is a schema header.
"""

from __future__ import annotations

import json
from pathlib import Path

SCHEMA = {"schema": "smartfreeze-metrics", "version": 1}


def _dump(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=False)


class MetricsSink:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")
        self._fh.write(_dump(SCHEMA) + "\n")

    def write(self, record: dict):
        self._fh.write(_dump(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_summary(path, summary: dict):
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def read_metrics(path) -> tuple[dict, list[dict]]:
    """(header, records); tolerates a truncated final line."""
    header = None
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            break  # truncated tail from a crash
        if header is None:
            header = obj
        else:
            records.append(obj)
    return header or {}, records
