"""Append-only CSV metrics.

Each row is serialized in memory and written with a single ``write`` plus
flush, so a crash can leave at most an unterminated last line, which
:func:`read_metrics` drops.  Wall times go to a separate ``timing.csv`` so
``metrics.csv`` stays bit-reproducible.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import numpy as np

METRIC_FIELDS = ["run_id", "stage", "epoch", "group", "l_ce", "l_fd", "l_st", "l_ts", "reg", "train_acc", "test_acc", "alpha"]
TIMING_FIELDS = ["run_id", "stage", "epoch", "group", "wall_time"]


def format_alpha(alphas: Sequence[np.ndarray]) -> str:
    """Groups separated by ``|``, weights within a group by ``;`` (shortest round-trip repr)."""
    return "|".join(";".join(repr(float(v)) for v in a) for a in alphas)


def parse_alpha(text: str) -> list[np.ndarray]:
    if not text:
        return []
    return [np.array([float(v) for v in grp.split(";")]) for grp in text.split("|")]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CsvLog:
    def __init__(self, path, fieldnames: Sequence[str]):
        self.path = Path(path)
        self.fieldnames = list(fieldnames)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self._write_line(self.fieldnames)

    def _write_line(self, values) -> None:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(values)
        with open(self.path, "a", newline="") as f:
            f.write(buf.getvalue())
            f.flush()

    def append(self, row: dict) -> None:
        unknown = set(row) - set(self.fieldnames)
        if unknown:
            raise KeyError(f"unknown metric fields {sorted(unknown)}")
        self._write_line([_fmt(row.get(k)) for k in self.fieldnames])


class MetricsWriter(CsvLog):
    def __init__(self, path):
        super().__init__(path, METRIC_FIELDS)


class TimingWriter(CsvLog):
    def __init__(self, path):
        super().__init__(path, TIMING_FIELDS)


def read_metrics(path) -> list[dict]:
    """Rows as dicts of strings; an unterminated trailing line is ignored."""
    text = Path(path).read_text()
    if text and not text.endswith("\n"):
        text = text[: text.rfind("\n") + 1]
    return list(csv.DictReader(io.StringIO(text)))
