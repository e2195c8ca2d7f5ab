"""Retention statistics and cost report files."""

import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from vtprune.core.pruner import SelectionResult
from vtprune.metrics.flops import CostReport
from vtprune.utils.exceptions import ArgumentError
from vtprune.utils.fileutils import format_float, write_csv

logger = logging.getLogger(__name__)

REPORT_HEADER = (
    "variant",
    "visual_tokens",
    "text_tokens",
    "total_tflops",
    "reduction",
    "retained_mean",
    "retained_std",
)


def count_stats(counts: Iterable[int]) -> Tuple[float, float]:
    """Mean and population standard deviation of token counts."""
    values = np.asarray(list(counts), dtype=np.float64)
    if values.size == 0:
        raise ArgumentError("retention statistics need at least one count")
    return float(values.mean()), float(values.std())


def retention_stats(
    selections: Sequence[SelectionResult],
) -> Tuple[float, float]:
    """
    Mean and population standard deviation of |kept_indices|.

    Raises:
        ArgumentError: If ``selections`` is empty
    """
    return count_stats(selection.count for selection in selections)


def format_retention(mean: float, std: float) -> str:
    """Render as ``78±11 tokens``."""
    return f"{mean:.0f}±{std:.0f} tokens"


def report_rows(reports: Sequence[CostReport]) -> List[List[str]]:
    rows = []
    for report in reports:
        retained = (
            report.retained_mean
            if report.retained_mean is not None
            else float(report.visual_tokens)
        )
        rows.append(
            [
                report.variant,
                str(report.visual_tokens),
                str(report.text_tokens),
                format_float(report.total_tflops),
                format_float(report.reduction_vs_baseline),
                format_float(retained),
                format_float(report.retained_std),
            ]
        )
    return rows


def emit_report(
    reports: Sequence[CostReport], path: Union[str, Path]
) -> Path:
    """
    Write cost reports as CSV with a fixed header.

    Raises:
        ReportIOError: If the file cannot be written
    """
    return write_csv(path, REPORT_HEADER, report_rows(reports))


def format_cost_table(reports: Sequence[CostReport]) -> str:
    """Human-readable table of the reports for standard output."""
    header = (
        f"{'variant':<18}{'visual':>8}{'text':>6}"
        f"{'TFLOPs':>10}{'attn^2 TF':>11}{'reduction':>11}"
    )
    lines = [header, "-" * len(header)]
    for report in reports:
        lines.append(
            f"{report.variant:<18}{report.visual_tokens:>8}"
            f"{report.text_tokens:>6}{report.total_tflops:>10.3f}"
            f"{report.attention_quadratic_flops / 1e12:>11.4f}"
            f"{report.reduction_vs_baseline:>10.1%} "
        )
    return "\n".join(lines)
