"""Run artifacts: timing records, timelines, traces, variance extrapolation.

All CSV files start with a ``# schema: <name>/<major>.<minor>`` line so that
downstream consumers can reject incompatible majors.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .chem import ContractViolation

TIMELINE_SCHEMA = "sqd.timeline/1.0"
DE_TRACE_SCHEMA = "sqd.de_trace/1.0"
VARIANCE_SCHEMA = "sqd.variance/1.0"

PHASES = (
    "throw",
    "retrieve",
    "pre-processing",
    "diagonalization",
    "quantum-execution",
)


def resource_of(phase: str) -> str:
    return "sampler" if phase == "quantum-execution" else "classical"


@dataclass(frozen=True)
class TimingRecord:
    """One timed phase instance, on the run's monotonic clock."""

    phase: str
    population: int
    walker: int
    iteration: int
    start_s: float
    end_s: float
    start_wall: str = ""
    end_wall: str = ""

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ContractViolation(f"unknown phase {self.phase!r}")
        if self.end_s < self.start_s:
            raise ContractViolation("phase ends before it starts")


def _merged_length(intervals: list[tuple[float, float]]) -> float:
    total = 0.0
    last_end = -math.inf
    for start, end in sorted(intervals):
        if start > last_end:
            total += end - start
            last_end = end
        elif end > last_end:
            total += end - last_end
            last_end = end
    return total


def idle_summary(records: list[TimingRecord]) -> dict:
    """Per-resource busy/idle fractions over the spanned run window."""
    if not records:
        return {}
    t0 = min(r.start_s for r in records)
    t1 = max(r.end_s for r in records)
    span = max(t1 - t0, 0.0)
    out = {}
    for resource in ("sampler", "classical"):
        intervals = [
            (r.start_s, r.end_s) for r in records if resource_of(r.phase) == resource
        ]
        covered = _merged_length(intervals)
        out[resource] = {
            "covered_s": covered,
            "span_s": span,
            "idle_fraction": 1.0 - covered / span if span > 0 else 0.0,
        }
    return out


def write_timeline(records: list[TimingRecord], csv_path, json_path=None) -> None:
    """Timeline CSV (one row per phase instance) plus a JSON summary."""
    rows = sorted(records, key=lambda r: (r.start_s, r.end_s))
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"# schema: {TIMELINE_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["phase", "resource", "population", "walker", "iteration",
             "start_s", "end_s", "start_wall", "end_wall"]
        )
        for r in rows:
            writer.writerow(
                [r.phase, resource_of(r.phase), r.population, r.walker,
                 r.iteration, f"{r.start_s:.6f}", f"{r.end_s:.6f}",
                 r.start_wall, r.end_wall]
            )
    if json_path is not None:
        payload = {
            "schema": TIMELINE_SCHEMA,
            "records": [asdict(r) for r in rows],
            "idle": idle_summary(rows),
        }
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=1)


def read_timeline(csv_path) -> list[TimingRecord]:
    records = []
    with open(csv_path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema:"):
            raise ContractViolation(f"{csv_path}: missing schema header")
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(
                TimingRecord(
                    phase=row["phase"],
                    population=int(row["population"]),
                    walker=int(row["walker"]),
                    iteration=int(row["iteration"]),
                    start_s=float(row["start_s"]),
                    end_s=float(row["end_s"]),
                    start_wall=row.get("start_wall", ""),
                    end_wall=row.get("end_wall", ""),
                )
            )
    return records


@dataclass(frozen=True)
class DETraceRow:
    iteration: int
    population: int
    walker: int
    energy: float
    accepted: bool
    param_hash: str


def write_de_trace(rows: list[DETraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {DE_TRACE_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "population", "walker", "energy", "accepted", "param_hash"])
        for r in rows:
            writer.writerow(
                [r.iteration, r.population, r.walker, f"{r.energy!r}",
                 int(r.accepted), r.param_hash]
            )


def read_de_trace(path) -> list[DETraceRow]:
    rows = []
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema:"):
            raise ContractViolation(f"{path}: missing schema header")
        for row in csv.DictReader(fh):
            rows.append(
                DETraceRow(
                    iteration=int(row["iteration"]),
                    population=int(row["population"]),
                    walker=int(row["walker"]),
                    energy=float(row["energy"]),
                    accepted=bool(int(row["accepted"])),
                    param_hash=row["param_hash"],
                )
            )
    return rows


@dataclass(frozen=True)
class VariancePoint:
    """One (energy, energy-variance) point for the zero-variance fit."""

    energy: float
    variance: float
    label: str = ""

    def __post_init__(self) -> None:
        if self.variance < 0:
            raise ContractViolation(f"negative variance {self.variance}")


def write_variance_csv(points: list[VariancePoint], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {VARIANCE_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(["label", "energy", "variance"])
        for p in points:
            writer.writerow([p.label, f"{p.energy!r}", f"{p.variance!r}"])


def read_variance_csv(path) -> list[VariancePoint]:
    points = []
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema:"):
            raise ContractViolation(f"{path}: missing schema header")
        for row in csv.DictReader(fh):
            points.append(
                VariancePoint(
                    energy=float(row["energy"]),
                    variance=float(row["variance"]),
                    label=row.get("label", ""),
                )
            )
    return points


def extrapolate_zero_variance(points: list[VariancePoint]) -> tuple[float, float]:
    """Ordinary least squares of energy against variance.

    Returns the zero-variance intercept and its standard error from the fit
    covariance (zero for an exact fit or with only two points).
    """
    if len(points) < 2:
        raise ContractViolation("extrapolation needs at least two points")
    x = np.asarray([p.variance for p in points], dtype=float)
    y = np.asarray([p.energy for p in points], dtype=float)
    if np.ptp(x) == 0.0:
        raise ContractViolation("degenerate abscissae: all variances identical")
    design = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    residuals = y - design @ coef
    dof = len(points) - 2
    if dof > 0:
        s2 = float(residuals @ residuals) / dof
        cov = s2 * np.linalg.inv(design.T @ design)
        sigma = math.sqrt(max(cov[0, 0], 0.0))
    else:
        sigma = 0.0
    return float(coef[0]), sigma
