"""Tests for retention statistics and report files."""

import math

import numpy as np
import pytest

from vtprune.core.numeric import Matrix
from vtprune.core.pruner import ScoreMatrix, select_infer
from vtprune.metrics.flops import LLAMA2_7B, calibrate_overheads, pipeline_cost
from vtprune.metrics.reports import (
    REPORT_HEADER,
    count_stats,
    emit_report,
    format_cost_table,
    format_retention,
    retention_stats,
)
from vtprune.utils.exceptions import ArgumentError, ReportIOError
from vtprune.utils.fileutils import read_csv


def welford(values):
    """Streaming mean and population standard deviation."""
    mean, m2 = 0.0, 0.0
    for count, value in enumerate(values, start=1):
        delta = value - mean
        mean += delta / count
        m2 += delta * (value - mean)
    return mean, math.sqrt(m2 / len(values))


def llama_reports():
    arch = calibrate_overheads(LLAMA2_7B)
    baseline = pipeline_cost(512, 30, arch, variant="baseline")
    pruned = pipeline_cost(
        78, 30, arch, baseline=baseline, variant="pruned", retained_std=11.0
    )
    return [baseline, pruned]


class TestRetentionStats:
    """Tests for count_stats and retention_stats."""

    def test_examples(self):
        """Test two counts and identical counts."""
        assert count_stats([1, 3]) == (2.0, 1.0)
        assert count_stats([5, 5, 5]) == (5.0, 0.0)

    def test_empty(self):
        """Test no selections is an argument error."""
        with pytest.raises(ArgumentError):
            count_stats([])
        with pytest.raises(ArgumentError):
            retention_stats([])

    def test_matches_streaming_oracle(self):
        """Test ten thousand counts against Welford's recurrence."""
        counts = np.random.default_rng(0).integers(1, 200, size=10000)
        mean, std = count_stats(counts)
        expected_mean, expected_std = welford(counts.tolist())
        assert mean == pytest.approx(expected_mean, rel=1e-12)
        assert std == pytest.approx(expected_std, rel=1e-9)

    def test_selections(self):
        """Test statistics over real selection results."""
        selections = [
            select_infer(ScoreMatrix(Matrix([[1.0, 0.0], [0.0, 1.0]]))),
            select_infer(ScoreMatrix(Matrix([[1.0, 0.0], [1.0, 0.0]]))),
        ]
        assert retention_stats(selections) == (1.5, 0.5)

    def test_format(self):
        """Test the mean and spread rendering."""
        assert format_retention(78.2, 10.6) == "78±11 tokens"


class TestEmitReport:
    """Tests for the CSV report writer."""

    def test_empty_report_has_header_only(self, tmp_path):
        """Test no reports writes just the header line."""
        path = emit_report([], tmp_path / "flops.csv")
        assert path.read_text() == ",".join(REPORT_HEADER) + "\n"

    def test_one_row_per_report(self, tmp_path):
        """Test the layout and exact float round trip."""
        reports = llama_reports()
        path = emit_report(reports[1:], tmp_path / "out" / "flops.csv")
        assert len(path.read_text().splitlines()) == 2

        header, rows = read_csv(path)
        assert tuple(header) == REPORT_HEADER
        row = dict(zip(header, rows[0]))
        assert row["variant"] == "pruned"
        assert row["visual_tokens"] == "78"
        assert float(row["reduction"]) == reports[1].reduction_vs_baseline
        assert float(row["total_tflops"]) == reports[1].total_tflops
        assert float(row["retained_std"]) == 11.0

    def test_unwritable_destination(self, tmp_path):
        """Test a parent that is a file raises ReportIOError."""
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        with pytest.raises(ReportIOError) as info:
            emit_report(llama_reports(), blocker / "flops.csv")
        assert "blocker" in str(info.value)

    def test_cost_table(self):
        """Test the console table lists both variants."""
        table = format_cost_table(llama_reports())
        lines = table.splitlines()
        assert len(lines) == 4
        assert lines[2].startswith("baseline")
        assert lines[3].startswith("pruned")
        assert "8.800" in lines[2]
