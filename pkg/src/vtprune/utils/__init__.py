"""Utility modules for vtprune."""

from vtprune.utils.config import RunConfig, get_setting, load_config
from vtprune.utils.exceptions import (
    ArgumentError,
    ConfigError,
    ContractError,
    NumericError,
    ReportIOError,
    ShapeError,
    TrainingError,
    VtPruneError,
)
from vtprune.utils.fileutils import ensure_output_dir, write_csv

__all__ = [
    "VtPruneError",
    "ShapeError",
    "ArgumentError",
    "ContractError",
    "NumericError",
    "TrainingError",
    "ConfigError",
    "ReportIOError",
    "RunConfig",
    "load_config",
    "get_setting",
    "ensure_output_dir",
    "write_csv",
]
