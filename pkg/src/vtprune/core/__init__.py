"""Matrix numerics, gradients and the token pruners."""

from vtprune.core.learnable import (
    LearnableQueryBank,
    init_bank,
    score_llm,
    score_vision,
)
from vtprune.core.numeric import GradientContext, Matrix, Rng
from vtprune.core.pruner import (
    NoiseSchedule,
    PruneMode,
    SelectionResult,
    TokenBatch,
    alpha_at,
    prune,
    select_infer,
    select_train,
)

__all__ = [
    "GradientContext",
    "Matrix",
    "Rng",
    "TokenBatch",
    "SelectionResult",
    "NoiseSchedule",
    "PruneMode",
    "alpha_at",
    "prune",
    "select_train",
    "select_infer",
    "LearnableQueryBank",
    "init_bank",
    "score_vision",
    "score_llm",
]
