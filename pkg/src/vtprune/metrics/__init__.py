"""FLOPs accounting and retention statistics."""

from vtprune.metrics.flops import (
    ArchSpec,
    CostReport,
    decoder_flops,
    pipeline_cost,
)
from vtprune.metrics.reports import emit_report, retention_stats

__all__ = [
    "ArchSpec",
    "CostReport",
    "decoder_flops",
    "pipeline_cost",
    "retention_stats",
    "emit_report",
]
