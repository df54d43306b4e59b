"""Per-experiment accuracy statistics and plain-text/CSV report tables."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class EmptyReportError(ValueError):
    pass


@dataclass
class RunSummary:
    name: str
    seeds: list[int]
    accuracies: list[float]  # final test accuracy of each completed seed, in seed order
    failed: dict[int, str] = field(default_factory=dict)  # seed -> cause

    def __post_init__(self):
        if len(self.seeds) != len(self.accuracies):
            raise ValueError("one accuracy per completed seed is required")

    @property
    def count(self) -> int:
        return len(self.accuracies)

    @property
    def degraded(self) -> bool:
        return bool(self.failed)

    def _stat(self, fn) -> float:
        return float(fn(np.asarray(self.accuracies))) if self.accuracies else math.nan

    @property
    def min(self) -> float:
        return self._stat(np.min)

    @property
    def median(self) -> float:
        return self._stat(np.median)

    @property
    def max(self) -> float:
        return self._stat(np.max)

    @property
    def mean(self) -> float:
        return self._stat(np.mean)

    @property
    def std(self) -> float:
        # population standard deviation over the completed seeds
        return self._stat(np.std)

    def to_json(self) -> str:
        data = asdict(self)
        data["failed"] = {str(k): v for k, v in self.failed.items()}
        data.update(count=self.count, min=self.min, median=self.median, max=self.max, mean=self.mean,
                    std=self.std, degraded=self.degraded)
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunSummary":
        data = json.loads(text)
        return cls(data["name"], list(data["seeds"]), list(data["accuracies"]),
                   {int(k): v for k, v in data.get("failed", {}).items()})

    @classmethod
    def load(cls, path: str | Path) -> "RunSummary":
        return cls.from_json(Path(path).read_text())


COLUMNS = ("experiment", "runs", "min", "median", "max", "mean", "std", "degraded")


@dataclass
class Report:
    rows: list[RunSummary]

    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in self.rows:
            writer.writerow([r.name, r.count, repr(r.min), repr(r.median), repr(r.max), repr(r.mean),
                             repr(r.std), "yes" if r.degraded else "no"])
        return buf.getvalue()

    def text(self) -> str:
        width = max(len("experiment"), *(len(r.name) for r in self.rows))
        lines = [f"{'experiment':<{width}}  runs     min  median     max    mean     std"]
        for r in self.rows:
            flag = "  DEGRADED" if r.degraded else ""
            lines.append(f"{r.name:<{width}}  {r.count:>4}  {100 * r.min:6.2f}  {100 * r.median:6.2f}  "
                         f"{100 * r.max:6.2f}  {100 * r.mean:6.2f}  {100 * r.std:6.2f}{flag}")
        return "\n".join(lines)


def summarize(results: list[RunSummary]) -> Report:
    """Sort experiments by median accuracy, best first (accuracies shown in percent)."""
    completed = [r for r in results if r.count > 0]
    if not completed:
        raise EmptyReportError("no completed runs to report")
    return Report(sorted(completed, key=lambda r: (-r.median, r.name)))


def comparison_rows(baseline: RunSummary, variants: list[RunSummary]) -> list[dict[str, object]]:
    """Median difference of each variant against the baseline, in accuracy units."""
    return [{"baseline": baseline.name, "variant": v.name, "baseline_median": baseline.median,
             "variant_median": v.median, "delta_median": v.median - baseline.median} for v in variants]


def comparison_csv(rows: list[dict[str, object]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["baseline", "variant", "baseline_median", "variant_median",
                                             "delta_median"], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def collect(root: str | Path) -> list[RunSummary]:
    """Every ``summary.json`` below ``root``."""
    return [RunSummary.load(p) for p in sorted(Path(root).rglob("summary.json"))]
