import json
import math

import numpy as np
import pytest

from sqd.chem import ContractViolation
from sqd.reporting import (
    DETraceRow,
    TimingRecord,
    VariancePoint,
    extrapolate_zero_variance,
    idle_summary,
    read_de_trace,
    read_timeline,
    read_variance_csv,
    resource_of,
    write_de_trace,
    write_timeline,
    write_variance_csv,
)


class TestTimingRecords:
    def test_phase_validation(self):
        with pytest.raises(ContractViolation):
            TimingRecord("nonsense", 0, 0, 0, 0.0, 1.0)
        with pytest.raises(ContractViolation):
            TimingRecord("throw", 0, 0, 0, 2.0, 1.0)

    def test_resources(self):
        assert resource_of("quantum-execution") == "sampler"
        for phase in ("throw", "retrieve", "pre-processing", "diagonalization"):
            assert resource_of(phase) == "classical"

    def test_roundtrip(self, tmp_path):
        records = [
            TimingRecord("throw", 0, -1, 0, 0.0, 0.1),
            TimingRecord("quantum-execution", 0, 0, 0, 0.1, 0.9),
            TimingRecord("diagonalization", 0, 0, 0, 1.0, 1.4),
        ]
        csv_path = tmp_path / "timeline.csv"
        json_path = tmp_path / "timeline.json"
        write_timeline(records, csv_path, json_path)
        again = read_timeline(csv_path)
        assert [(r.phase, r.start_s, r.end_s) for r in again] == [
            (r.phase, r.start_s, r.end_s) for r in records
        ]
        payload = json.loads(json_path.read_text())
        assert payload["schema"].startswith("sqd.timeline/")
        assert "idle" in payload

    def test_empty_timeline_has_headers(self, tmp_path):
        csv_path = tmp_path / "empty.csv"
        write_timeline([], csv_path, tmp_path / "empty.json")
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("# schema:")
        assert lines[1].startswith("phase,")
        assert read_timeline(csv_path) == []

    def test_idle_fraction_on_hand_fixture(self):
        # classical busy [0, 1] and [2, 3], sampler busy [0, 4]: classical
        # idle fraction = 1 - 2/4
        records = [
            TimingRecord("diagonalization", 0, 0, 0, 0.0, 1.0),
            TimingRecord("pre-processing", 0, 0, 0, 2.0, 3.0),
            TimingRecord("quantum-execution", 1, 0, 0, 0.0, 4.0),
        ]
        idle = idle_summary(records)
        assert abs(idle["classical"]["idle_fraction"] - 0.5) < 1e-12
        assert abs(idle["sampler"]["idle_fraction"] - 0.0) < 1e-12

    def test_overlapping_intervals_merge(self):
        records = [
            TimingRecord("diagonalization", 0, 0, 0, 0.0, 2.0),
            TimingRecord("pre-processing", 0, 0, 0, 1.0, 3.0),
            TimingRecord("quantum-execution", 1, 0, 0, 0.0, 4.0),
        ]
        idle = idle_summary(records)
        assert abs(idle["classical"]["covered_s"] - 3.0) < 1e-12


class TestDeTrace:
    def test_roundtrip(self, tmp_path):
        rows = [
            DETraceRow(0, 0, 0, -1.25, True, "abc123"),
            DETraceRow(1, 1, 3, -1.5, False, "def456"),
        ]
        path = tmp_path / "trace.csv"
        write_de_trace(rows, path)
        assert read_de_trace(path) == rows

    def test_missing_schema_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("iteration,population\n0,0\n")
        with pytest.raises(ContractViolation):
            read_de_trace(path)


class TestVariancePoints:
    def test_negative_variance_rejected(self):
        with pytest.raises(ContractViolation):
            VariancePoint(energy=-1.0, variance=-0.1)

    def test_roundtrip(self, tmp_path):
        points = [
            VariancePoint(-1.5, 0.25, "dim100"),
            VariancePoint(-1.7, 0.125, "dim400"),
        ]
        path = tmp_path / "var.csv"
        write_variance_csv(points, path)
        assert read_variance_csv(path) == points


class TestExtrapolation:
    def test_exact_line_recovers_intercept(self):
        points = [VariancePoint(-1.0 + 2.0 * v, v) for v in (0.1, 0.2, 0.4, 0.8)]
        intercept, sigma = extrapolate_zero_variance(points)
        assert abs(intercept - (-1.0)) < 1e-12
        assert sigma < 1e-12

    def test_two_points_exact(self):
        points = [VariancePoint(1.0, 1.0), VariancePoint(2.0, 2.0)]
        intercept, sigma = extrapolate_zero_variance(points)
        assert abs(intercept - 0.0) < 1e-12
        assert sigma == 0.0

    def test_degenerate_abscissae_rejected(self):
        points = [VariancePoint(1.0, 0.5), VariancePoint(2.0, 0.5)]
        with pytest.raises(ContractViolation):
            extrapolate_zero_variance(points)
        with pytest.raises(ContractViolation):
            extrapolate_zero_variance([VariancePoint(1.0, 0.5)])

    def test_monte_carlo_coverage(self):
        # 2 sigma intervals from the OLS intercept error cover the truth in
        # >= 90 of 100 trials with Gaussian noise
        rng = np.random.default_rng(77)
        truth_intercept, slope, noise = -2.5, 3.0, 0.05
        covered = 0
        for _ in range(100):
            x = np.linspace(0.05, 0.6, 8)
            y = truth_intercept + slope * x + rng.normal(scale=noise, size=x.size)
            points = [VariancePoint(float(e), float(v)) for e, v in zip(y, x)]
            intercept, sigma = extrapolate_zero_variance(points)
            if abs(intercept - truth_intercept) <= 2 * sigma:
                covered += 1
        assert covered >= 90

    def test_matches_closed_form_ols(self):
        rng = np.random.default_rng(78)
        x = rng.uniform(0.1, 1.0, size=12)
        y = rng.normal(size=12)
        points = [VariancePoint(float(e), float(v)) for e, v in zip(y, x)]
        intercept, sigma = extrapolate_zero_variance(points)
        # closed-form simple linear regression
        xbar, ybar = x.mean(), y.mean()
        slope = np.sum((x - xbar) * (y - ybar)) / np.sum((x - xbar) ** 2)
        expected_intercept = ybar - slope * xbar
        residuals = y - (expected_intercept + slope * x)
        s2 = residuals @ residuals / (len(x) - 2)
        expected_sigma = math.sqrt(
            s2 * (1 / len(x) + xbar**2 / np.sum((x - xbar) ** 2))
        )
        assert abs(intercept - expected_intercept) < 1e-12
        assert abs(sigma - expected_sigma) < 1e-12
