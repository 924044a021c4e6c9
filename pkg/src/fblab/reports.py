"""Inequality-check records and their CSV form."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

REPORT_COLUMNS = ("check", "x0", "r", "lhs", "rhs", "ratio", "slack", "pass")


@dataclass
class EstimateReport:
    check: str
    x0: tuple[float, ...]
    r: float
    lhs: float
    rhs: float
    slack: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = tuple(float(c) for c in self.x0)
        for name in ("lhs", "rhs"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")

    @property
    def ratio(self) -> float:
        if self.rhs == 0:
            return 0.0 if self.lhs == 0 else math.inf
        return self.lhs / self.rhs

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs * (1 + self.slack)

    def row(self) -> list[str]:
        return [
            self.check,
            " ".join(f"{c:.17g}" for c in self.x0),
            f"{self.r:.17g}",
            f"{self.lhs:.17g}",
            f"{self.rhs:.17g}",
            f"{self.ratio:.17g}",
            f"{self.slack:.17g}",
            "1" if self.passed else "0",
        ]


def reports_to_csv(reports: Iterable[EstimateReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for rep in reports:
        w.writerow(rep.row())
    return buf.getvalue()


def write_reports(path, reports: Sequence[EstimateReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(reports_to_csv(reports))
