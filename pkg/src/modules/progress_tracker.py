"""
Progress tracking for training runs: the append-only metric log, multi-seed
aggregation and transiency summaries.
"""
import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from src.utils.errors import AggregationError, FormatError, ParameterError

HEADER = ["step", "seed", "split", "value"]
AGGREGATE_HEADER = ["step", "split", "mean", "std", "n"]


def format_value(value: float) -> str:
    """Shortest round-tripping text for a float."""
    return repr(float(value))


@dataclass(frozen=True)
class MetricRow:
    step: int
    seed: int
    split: str
    value: float


class MetricLog:
    """
    Append-only (step, seed, split, value) rows.

    When bound to a path every append is written and flushed immediately, so a
    crash loses at most the row being written.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None, monotone: bool = True):
        self.path = Path(path) if path else None
        self.monotone = monotone
        self.rows: List[MetricRow] = []
        self._last: Dict[Tuple[int, str], int] = {}
        if self.path and self.path.exists():
            for row in read_rows(self.path):
                self._remember(row)
        elif self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                fh.write(",".join(HEADER) + "\n")

    def _remember(self, row: MetricRow):
        self.rows.append(row)
        self._last[(row.seed, row.split)] = row.step

    def append(self, step: int, seed: int, split: str, value: float) -> MetricRow:
        last = self._last.get((seed, split))
        if self.monotone and last is not None and step < last:
            raise ParameterError(f"metric {split} (seed {seed}) went back from step {last} to {step}")
        row = MetricRow(int(step), int(seed), split, float(value))
        self._remember(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                fh.write(f"{row.step},{row.seed},{row.split},{format_value(row.value)}\n")
        return row

    def truncate_after(self, step: int):
        """Drop rows past ``step`` (used when resuming from a checkpoint)."""
        kept = [r for r in self.rows if r.step <= step]
        self.rows, self._last = [], {}
        for r in kept:
            self._remember(r)
        if self.path:
            write_rows(self.path, self.rows)

    @property
    def seeds(self) -> List[int]:
        return sorted({r.seed for r in self.rows})

    @property
    def splits(self) -> List[str]:
        return sorted({r.split for r in self.rows})

    def series(self, split: str, seed: Optional[int] = None) -> List[Tuple[int, float]]:
        return [(r.step, r.value) for r in self.rows
                if r.split == split and (seed is None or r.seed == seed)]

    def last_step(self) -> int:
        return max((r.step for r in self.rows), default=-1)

    def __len__(self) -> int:
        return len(self.rows)


def write_rows(path: Union[str, Path], rows: Iterable[MetricRow]):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(",".join(HEADER) + "\n")
        for r in rows:
            fh.write(f"{r.step},{r.seed},{r.split},{format_value(r.value)}\n")
    tmp.replace(path)


def read_rows(path: Union[str, Path]) -> List[MetricRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise FormatError(f"{path}: expected header {','.join(HEADER)}")
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            try:
                step, seed, split, value = rec
                rows.append(MetricRow(int(step), int(seed), split, float(value)))
            except ValueError as exc:
                raise FormatError(f"{path}: bad metric row at line {line_no}: {rec}") from exc
    return rows


def read_log(path: Union[str, Path]) -> MetricLog:
    """Load a metric CSV into an unbound log."""
    log = MetricLog(monotone=False)
    for r in read_rows(path):
        log._remember(r)
    return log


# =========================================================
# AGGREGATION
# =========================================================

@dataclass(frozen=True)
class AggregateRow:
    step: int
    split: str
    mean: float
    std: float
    n: int


def aggregate_runs(logs: List[MetricLog]) -> List[AggregateRow]:
    """
    Per-step mean and population std across seeds, per split.

    Every seed must report a split on the same step grid.
    """
    if not logs:
        raise AggregationError("no logs to aggregate")
    per_seed: Dict[str, Dict[int, Dict[int, float]]] = defaultdict(lambda: defaultdict(dict))
    for log in logs:
        for r in log.rows:
            per_seed[r.split][r.seed][r.step] = r.value
    out = []
    for split in sorted(per_seed):
        grids = {seed: tuple(sorted(vals)) for seed, vals in per_seed[split].items()}
        reference = max(grids.values(), key=len)
        bad = [seed for seed, grid in grids.items() if grid != reference]
        if bad:
            raise AggregationError(f"split {split} has misaligned step grids", seeds=bad)
        for step in reference:
            vals = np.array([per_seed[split][seed][step] for seed in sorted(grids)], dtype=np.float64)
            out.append(AggregateRow(step, split, float(vals.mean()), float(vals.std()), len(vals)))
    out.sort(key=lambda r: (r.split, r.step))
    return out


def write_aggregate(path: Union[str, Path], rows: List[AggregateRow]):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(AGGREGATE_HEADER) + "\n")
        for r in rows:
            fh.write(f"{r.step},{r.split},{format_value(r.mean)},{format_value(r.std)},{r.n}\n")


# =========================================================
# TRANSIENCY
# =========================================================

@dataclass
class Transiency:
    """Peak and final value of a curve and how far it fell after peaking."""
    split: str
    peak: float
    peak_step: int
    final: float
    final_step: int
    drop: float = field(init=False)

    def __post_init__(self):
        self.drop = self.peak - self.final


def transiency(points: List[Tuple[int, float]], split: str = "") -> Transiency:
    """Summarize a (step, value) curve; ties for the peak resolve to the earliest step."""
    if not points:
        raise ParameterError(f"no points for split {split!r}")
    points = sorted(points)
    peak_step, peak = max(points, key=lambda p: (p[1], -p[0]))
    final_step, final = points[-1]
    return Transiency(split, peak, peak_step, final, final_step)


def mean_curve(rows: List[AggregateRow], split: str) -> List[Tuple[int, float]]:
    return [(r.step, r.mean) for r in rows if r.split == split]
