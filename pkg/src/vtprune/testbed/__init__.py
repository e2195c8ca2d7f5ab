"""Toy vision-language-action testbed for the pruners."""

from vtprune.testbed.data import SyntheticSample, generate_sample
from vtprune.testbed.model import ToyModel
from vtprune.testbed.training import (
    RecoveryMetrics,
    TrainReport,
    evaluate_recovery,
    train,
)

__all__ = [
    "SyntheticSample",
    "generate_sample",
    "ToyModel",
    "TrainReport",
    "RecoveryMetrics",
    "train",
    "evaluate_recovery",
]
