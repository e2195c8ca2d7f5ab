"""Parameter-free visual token pruning.

Queries come from cross attention between visual and language tokens with
no weights, each query scores every patch token, and each query keeps the
token it scores highest. Training uses a noisy straight-through selection
so the scores receive gradients; inference uses a plain argmax.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from vtprune.core.numeric import (
    Matrix,
    Rng,
    add,
    concat_rows,
    gather_rows,
    inv_sqrt,
    matmul,
    no_grad,
    sample_gumbel_noise,
    sample_uniform_noise,
    scale,
    softmax_rows,
    straight_through,
    transpose,
)
from vtprune.utils.exceptions import ArgumentError, ContractError, ShapeError

logger = logging.getLogger(__name__)


class PruneMode(str, Enum):
    TRAIN = "train"
    INFER = "infer"


class NoiseMode(str, Enum):
    LINEAR_DECAY = "linear-decay"
    CONSTANT = "constant"
    OFF = "off"


class NoiseDistribution(str, Enum):
    UNIFORM = "uniform"
    GUMBEL = "gumbel"


@dataclass
class TokenBatch:
    """Token embeddings with their original position IDs."""

    embeddings: Matrix
    position_ids: np.ndarray
    cls_index: Optional[int] = None

    def __post_init__(self):
        self.position_ids = np.asarray(self.position_ids, dtype=np.int64)
        if self.position_ids.ndim != 1 or (
            len(self.position_ids) != self.embeddings.rows
        ):
            raise ContractError(
                f"{self.embeddings.rows} tokens but "
                f"{self.position_ids.size} position IDs"
            )
        if self.position_ids.size and self.position_ids.min() < 0:
            raise ContractError("position IDs must be non-negative")
        if np.any(np.diff(self.position_ids) <= 0):
            raise ContractError("position IDs must be strictly increasing")
        if self.cls_index is not None and not (
            0 <= self.cls_index < self.embeddings.rows
        ):
            raise ContractError(f"cls_index {self.cls_index} out of range")

    @classmethod
    def from_embeddings(
        cls,
        embeddings: Matrix,
        cls_index: Optional[int] = None,
        first_position: int = 0,
    ) -> "TokenBatch":
        """Batch with consecutive positions from ``first_position``."""
        positions = np.arange(embeddings.rows) + first_position
        return cls(embeddings, positions, cls_index)

    @property
    def length(self) -> int:
        return self.embeddings.rows

    @property
    def dim(self) -> int:
        return self.embeddings.cols

    def patch_indices(self) -> np.ndarray:
        """Sequence indices of every token except CLS."""
        indices = np.arange(self.length)
        if self.cls_index is None:
            return indices
        return indices[indices != self.cls_index]

    def patch_embeddings(self) -> Matrix:
        if self.cls_index is None:
            return self.embeddings
        return gather_rows(self.embeddings, self.patch_indices())

    def take(self, indices: Sequence[int]) -> "TokenBatch":
        """Detached subset in the given (sorted) order."""
        indices = np.asarray(indices, dtype=np.int64)
        return TokenBatch(
            Matrix(self.embeddings.data[indices]),
            self.position_ids[indices],
            _relocate_cls(self.cls_index, indices),
        )


@dataclass
class ScoreMatrix:
    """Query-by-token scores; column j is sequence token column_index[j]."""

    values: Matrix
    column_index: np.ndarray = None
    cls_index: Optional[int] = None

    def __post_init__(self):
        if self.column_index is None:
            self.column_index = np.arange(self.values.cols)
        self.column_index = np.asarray(self.column_index, dtype=np.int64)
        if len(self.column_index) != self.values.cols:
            raise ShapeError(
                f"{self.values.cols} score columns but "
                f"{len(self.column_index)} column indices"
            )
        if not np.all(np.isfinite(self.values.data)):
            raise ContractError("score matrix has non-finite entries")

    @property
    def n_queries(self) -> int:
        return self.values.rows


@dataclass
class SelectionResult:
    """Outcome of one selection pass.

    ``route_rows[k]`` is the query row whose straight-through contribution
    carries kept token ``kept_indices[k]`` (-1 for CLS).
    """

    kept_indices: np.ndarray
    indicator: Matrix
    noise_alpha_used: float
    per_row_argmax: np.ndarray
    column_index: np.ndarray = field(repr=False, default=None)
    route_rows: np.ndarray = field(repr=False, default=None)

    @property
    def count(self) -> int:
        return len(self.kept_indices)


@dataclass(frozen=True)
class NoiseSchedule:
    """Upper bound of the selection noise as a function of the step."""

    alpha_start: float = 1.0
    alpha_end: float = 0.0
    decay_steps: int = 0
    mode: NoiseMode = NoiseMode.LINEAR_DECAY

    def __post_init__(self):
        object.__setattr__(self, "mode", NoiseMode(self.mode))
        if self.alpha_start < 0 or self.alpha_end < 0:
            raise ArgumentError("noise bounds must be >= 0")
        if self.decay_steps < 0:
            raise ArgumentError("decay_steps must be >= 0")
        if (
            self.mode is NoiseMode.LINEAR_DECAY
            and self.alpha_end > self.alpha_start
        ):
            raise ArgumentError("linear decay needs alpha_end <= alpha_start")

    @classmethod
    def for_training(
        cls,
        steps: int,
        decay_fraction: float = 0.75,
        alpha_start: float = 1.0,
        alpha_end: float = 0.0,
        mode: NoiseMode = NoiseMode.LINEAR_DECAY,
    ) -> "NoiseSchedule":
        """Schedule decaying over the first ``decay_fraction`` of ``steps``."""
        return cls(alpha_start, alpha_end, int(steps * decay_fraction), mode)


def alpha_at(step: int, schedule: NoiseSchedule) -> float:
    """
    Noise upper bound for a training step.

    Args:
        step: Zero-based training step
        schedule: The noise schedule

    Returns:
        float: The bound alpha(step)
    """
    if step < 0:
        raise ArgumentError(f"step must be >= 0, got {step}")
    if schedule.mode is NoiseMode.OFF:
        return 0.0
    if schedule.mode is NoiseMode.CONSTANT:
        return schedule.alpha_start
    if step >= schedule.decay_steps:
        return schedule.alpha_end
    fraction = step / schedule.decay_steps
    span = schedule.alpha_end - schedule.alpha_start
    return schedule.alpha_start + span * fraction


def generate_queries(visual: TokenBatch, language: TokenBatch) -> Matrix:
    """
    One query per patch token: softmax(H_v H_l^T / sqrt(D)) H_l.

    The CLS token takes no part; no weights or biases are involved.

    Raises:
        ArgumentError: If there are no language tokens
        ShapeError: If the embedding widths differ
    """
    if language.length == 0:
        raise ArgumentError("query generation needs a language token")
    if visual.dim != language.dim:
        raise ShapeError(
            f"visual width {visual.dim} != language width {language.dim}"
        )
    patches = visual.patch_embeddings()
    lang = language.embeddings
    logits = scale(matmul(patches, transpose(lang)), inv_sqrt(visual.dim))
    return matmul(softmax_rows(logits), lang)


def score_tokens(queries: Matrix, visual: TokenBatch) -> ScoreMatrix:
    """
    Score every patch token with every query: Q H_v^T / sqrt(D).

    Raises:
        ShapeError: If the query width differs from the token width
    """
    if queries.cols != visual.dim:
        raise ShapeError(
            f"query width {queries.cols} != token width {visual.dim}"
        )
    patches = visual.patch_embeddings()
    values = scale(matmul(queries, transpose(patches)), inv_sqrt(visual.dim))
    return ScoreMatrix(values, visual.patch_indices(), visual.cls_index)


def _one_hot(columns: np.ndarray, width: int) -> np.ndarray:
    hard = np.zeros((len(columns), width))
    hard[np.arange(len(columns)), columns] = 1.0
    return hard


def _relocate_cls(
    cls_index: Optional[int], kept: np.ndarray
) -> Optional[int]:
    if cls_index is None:
        return None
    where = np.flatnonzero(kept == cls_index)
    return int(where[0]) if where.size else None


def _finish(
    scores: ScoreMatrix,
    columns: np.ndarray,
    indicator: Matrix,
    alpha: float,
    ranking: np.ndarray,
) -> SelectionResult:
    per_row = scores.column_index[columns]
    kept = set(per_row.tolist())
    if scores.cls_index is not None:
        kept.add(scores.cls_index)
    kept_indices = np.array(sorted(kept), dtype=np.int64)

    # Among queries that collide on one column, the highest (noisy) score
    # routes the straight-through gradient; ties go to the lowest row.
    route = np.full(len(kept_indices), -1, dtype=np.int64)
    rows = np.arange(len(columns))
    for position, token in enumerate(kept_indices):
        choosers = rows[per_row == token]
        if choosers.size:
            values = ranking[choosers, columns[choosers]]
            route[position] = choosers[int(np.argmax(values))]

    return SelectionResult(
        kept_indices=kept_indices,
        indicator=indicator,
        noise_alpha_used=float(alpha),
        per_row_argmax=per_row,
        column_index=scores.column_index,
        route_rows=route,
    )


def select_train(
    scores: ScoreMatrix,
    alpha: float,
    rng: Rng,
    distribution: NoiseDistribution = NoiseDistribution.UNIFORM,
) -> SelectionResult:
    """
    Noisy straight-through selection used while training.

    Adds noise bounded by ``alpha`` to the scores, takes each row's argmax
    as a one-hot indicator and routes its gradient through the row softmax
    of the noisy scores.

    Args:
        scores: Score matrix, possibly recorded by a gradient context
        alpha: Noise upper bound (0 disables noise)
        rng: Source of the noise
        distribution: Uniform U(0, alpha) or alpha-scaled standard Gumbel

    Returns:
        SelectionResult: Selection whose indicator is one-hot in value

    Raises:
        ArgumentError: If alpha is negative
    """
    if alpha < 0:
        raise ArgumentError(f"noise alpha must be >= 0, got {alpha}")
    shape = scores.values.shape
    if NoiseDistribution(distribution) is NoiseDistribution.GUMBEL:
        noise = sample_gumbel_noise(shape, alpha, rng)
    else:
        noise = sample_uniform_noise(shape, alpha, rng)

    noisy = add(scores.values, noise)
    soft = softmax_rows(noisy)
    columns = np.argmax(noisy.data, axis=1)
    indicator = straight_through(_one_hot(columns, shape[1]), soft)
    return _finish(scores, columns, indicator, alpha, noisy.data)


def select_infer(scores: ScoreMatrix) -> SelectionResult:
    """Deterministic per-row argmax; lowest column wins ties."""
    values = scores.values.data
    columns = np.argmax(values, axis=1)
    indicator = Matrix(_one_hot(columns, values.shape[1]))
    return _finish(scores, columns, indicator, 0.0, values)


def assemble_pruned(
    visual: TokenBatch, selection: SelectionResult
) -> TokenBatch:
    """
    Build the pruned batch from a training-time selection.

    Kept patch tokens come out of ``indicator @ H_patches`` so they carry the
    straight-through gradient; CLS is copied from the input. Tokens keep
    their original order and position IDs.
    """
    patches = gather_rows(visual.embeddings, selection.column_index)
    routed = matmul(selection.indicator, patches)
    kept = selection.kept_indices
    order = selection.route_rows.copy()
    sources = routed
    if visual.cls_index is not None and visual.cls_index in kept:
        cls_row = gather_rows(visual.embeddings, [visual.cls_index])
        sources = concat_rows(routed, cls_row)
        order[kept == visual.cls_index] = routed.rows
    embeddings = gather_rows(sources, order)
    return TokenBatch(
        embeddings,
        visual.position_ids[kept],
        _relocate_cls(visual.cls_index, kept),
    )


def prune(
    visual: TokenBatch,
    language: TokenBatch,
    mode: PruneMode = PruneMode.INFER,
    alpha: float = 0.0,
    rng: Optional[Rng] = None,
    distribution: NoiseDistribution = NoiseDistribution.UNIFORM,
) -> Tuple[TokenBatch, SelectionResult]:
    """
    Prune visual tokens against a language instruction.

    Args:
        visual: Visual tokens, optionally with a CLS token
        language: Language tokens of the same width
        mode: ``train`` (noisy, differentiable) or ``infer`` (plain argmax)
        alpha: Noise upper bound for train mode
        rng: Noise source for train mode
        distribution: Noise distribution for train mode

    Returns:
        Tuple[TokenBatch, SelectionResult]: Kept tokens and the selection
    """
    mode = PruneMode(mode)
    if mode is PruneMode.INFER:
        with no_grad():
            scores = score_tokens(generate_queries(visual, language), visual)
        selection = select_infer(scores)
        return visual.take(selection.kept_indices), selection

    if rng is None:
        raise ArgumentError("train-mode pruning needs an Rng")
    scores = score_tokens(generate_queries(visual, language), visual)
    selection = select_train(scores, alpha, rng, distribution)
    return assemble_pruned(visual, selection), selection
