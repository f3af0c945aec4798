"""Per-iteration metrics schema shared by the trainers and the CLI."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

CSV_FIELDS = ("iteration", "exchanged_scalars", "virtual_time",
              "train_nmse", "test_nmse", "per_ue_test_nmse_json")


class MetricsError(Exception):
    pass


@dataclass
class MetricsRow:
    iteration: int
    exchanged_scalars: int
    virtual_time: float
    train_nmse: Optional[float] = None
    test_nmse: Optional[float] = None
    per_ue_test_nmse: Optional[list[float]] = None

    def __post_init__(self):
        if self.exchanged_scalars < 0:
            raise MetricsError("exchanged scalar counter must be non-negative")
        for v in (self.train_nmse, self.test_nmse):
            if v is not None and v < 0:
                raise MetricsError(f"NMSE must be non-negative, got {v}")


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_metrics_csv(path, rows: Sequence[MetricsRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in rows:
            per_ue = "" if r.per_ue_test_nmse is None else json.dumps(
                [float(v) for v in r.per_ue_test_nmse], separators=(",", ":"))
            writer.writerow([r.iteration, r.exchanged_scalars, _fmt(r.virtual_time),
                             _fmt(r.train_nmse), _fmt(r.test_nmse), per_ue])


def read_metrics_csv(path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_FIELDS:
            raise MetricsError(f"unexpected metrics header in {path}: {reader.fieldnames}")
        for rec in reader:
            rows.append(MetricsRow(
                iteration=int(rec["iteration"]),
                exchanged_scalars=int(rec["exchanged_scalars"]),
                virtual_time=float(rec["virtual_time"]),
                train_nmse=float(rec["train_nmse"]) if rec["train_nmse"] else None,
                test_nmse=float(rec["test_nmse"]) if rec["test_nmse"] else None,
                per_ue_test_nmse=json.loads(rec["per_ue_test_nmse_json"]) if rec["per_ue_test_nmse_json"] else None,
            ))
    return rows
