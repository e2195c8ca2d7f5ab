"""Learnable-query token scoring.

A bank of N_q trained queries scores visual tokens after RMS normalization
of both sides. The decoder-site variant adds the text-to-visual attention
received by each token, weighted by a trainable scalar.
"""

import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from vtprune.core.numeric import (
    Matrix,
    Rng,
    add,
    inv_sqrt,
    matmul,
    mul,
    rms_normalize,
    scale,
    transpose,
)
from vtprune.core.pruner import ScoreMatrix, TokenBatch
from vtprune.utils.exceptions import (
    ArgumentError,
    ContractError,
    ReportIOError,
    ShapeError,
)
from vtprune.utils.fileutils import ensure_output_dir

logger = logging.getLogger(__name__)

DEFAULT_NUM_QUERIES = 128
ZETA_INIT = 1.0

_HEADER = struct.Struct("<QQ")


class AttentionReduce(str, Enum):
    MEAN = "mean"
    MAX = "max"


@dataclass
class LearnableQueryBank:
    """Trainable queries plus the gains of both RMS normalizations."""

    queries: Matrix
    query_gain: Matrix
    token_gain: Matrix

    def __post_init__(self):
        if self.queries.rows < 1:
            raise ArgumentError("a query bank needs at least one query")
        for name in ("query_gain", "token_gain"):
            gain = getattr(self, name)
            if gain.shape != (1, self.dim):
                raise ShapeError(
                    f"{name} has shape {gain.shape}, expected (1, {self.dim})"
                )

    @property
    def n_queries(self) -> int:
        return self.queries.rows

    @property
    def dim(self) -> int:
        return self.queries.cols

    def parameters(self) -> List[Matrix]:
        return [self.queries, self.query_gain, self.token_gain]


@dataclass
class AttentionSummary:
    """Attention each visual token receives, and its trainable weight."""

    scores: Matrix
    zeta: Matrix = field(default_factory=lambda: Matrix([[ZETA_INIT]]))

    def __post_init__(self):
        if self.scores.rows != 1:
            raise ShapeError("attention scores must be a single row")
        if self.zeta.shape != (1, 1):
            raise ShapeError("zeta must be a scalar")


def init_bank(
    n_q: int = DEFAULT_NUM_QUERIES, dim: int = 0, rng: Optional[Rng] = None
) -> LearnableQueryBank:
    """
    Draw queries from N(0, 1/dim) and set every gain to 1.

    Raises:
        ArgumentError: If either size is zero or no Rng is given
    """
    if n_q < 1 or dim < 1:
        raise ArgumentError(f"bank sizes must be >= 1, got {n_q}x{dim}")
    if rng is None:
        raise ArgumentError("init_bank needs an Rng")
    queries = rng.normal((n_q, dim), std=inv_sqrt(dim))
    return LearnableQueryBank(
        Matrix(queries), Matrix.ones(1, dim), Matrix.ones(1, dim)
    )


def _normalized_product(
    bank: LearnableQueryBank, visual: TokenBatch
) -> Tuple[Matrix, np.ndarray]:
    if bank.dim != visual.dim:
        raise ShapeError(
            f"bank width {bank.dim} != token width {visual.dim}"
        )
    columns = visual.patch_indices()
    if bank.n_queries > len(columns):
        raise ContractError(
            f"{bank.n_queries} queries for only {len(columns)} tokens"
        )
    queries = rms_normalize(bank.queries, bank.query_gain)
    tokens = rms_normalize(visual.patch_embeddings(), bank.token_gain)
    return matmul(queries, transpose(tokens)), columns


def score_vision(bank: LearnableQueryBank, visual: TokenBatch) -> ScoreMatrix:
    """Scores RMS(Q) RMS(H_v)^T / sqrt(D) at the vision encoder output."""
    product, columns = _normalized_product(bank, visual)
    values = scale(product, inv_sqrt(bank.dim))
    return ScoreMatrix(values, columns, visual.cls_index)


def score_llm(
    bank: LearnableQueryBank, visual: TokenBatch, attn: AttentionSummary
) -> ScoreMatrix:
    """
    Scores (RMS(Q) RMS(H_v)^T + zeta * attn) / sqrt(D) at a decoder layer.

    The weighted attention row is added to every query row.

    Raises:
        ShapeError: If ``attn`` does not cover every patch token
    """
    product, columns = _normalized_product(bank, visual)
    if attn.scores.cols != len(columns):
        raise ShapeError(
            f"attention covers {attn.scores.cols} tokens, "
            f"expected {len(columns)}"
        )
    weighted = mul(attn.zeta, attn.scores)
    values = scale(add(product, weighted), inv_sqrt(bank.dim))
    return ScoreMatrix(values, columns, visual.cls_index)


def aggregate_attention(
    raw: np.ndarray,
    reduce: AttentionReduce = AttentionReduce.MEAN,
    zeta: Optional[Matrix] = None,
    atol: float = 1e-6,
) -> AttentionSummary:
    """
    Collapse heads x text x visual attention into one value per visual token.

    ``mean`` averages over heads then text positions; ``max`` takes the
    strongest head before averaging over text positions.

    Raises:
        ContractError: If a row is negative or does not sum to 1
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3:
        raise ContractError(
            f"attention must be heads x text x visual, got {raw.shape}"
        )
    if np.any(raw < 0) or not np.allclose(raw.sum(axis=2), 1.0, atol=atol):
        raise ContractError("attention rows must be distributions")

    if AttentionReduce(reduce) is AttentionReduce.MAX:
        per_text = raw.max(axis=0)
    else:
        per_text = raw.mean(axis=0)
    summary = Matrix(per_text.mean(axis=0))
    if zeta is None:
        return AttentionSummary(summary)
    return AttentionSummary(summary, zeta)


def dump_bank(bank: LearnableQueryBank, zeta: float = ZETA_INIT) -> bytes:
    """
    Serialize a bank: little-endian (n_q, dim) header, then queries
    row-major, query gain, token gain and zeta as doubles.
    """
    body = np.concatenate(
        [
            bank.queries.data.ravel(),
            bank.query_gain.data.ravel(),
            bank.token_gain.data.ravel(),
            [float(zeta)],
        ]
    )
    header = _HEADER.pack(bank.n_queries, bank.dim)
    return header + body.astype("<f8").tobytes()


def load_bank(payload: bytes) -> Tuple[LearnableQueryBank, float]:
    """Inverse of ``dump_bank``."""
    if len(payload) < _HEADER.size:
        raise ContractError("bank payload shorter than its header")
    n_q, dim = _HEADER.unpack_from(payload)
    expected = _HEADER.size + 8 * (n_q * dim + 2 * dim + 1)
    if len(payload) != expected:
        raise ContractError(
            f"bank payload has {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype="<f8", offset=_HEADER.size)
    values = values.astype(np.float64)
    split = n_q * dim
    bank = LearnableQueryBank(
        Matrix(values[:split].reshape(n_q, dim)),
        Matrix(values[split : split + dim]),
        Matrix(values[split + dim : split + 2 * dim]),
    )
    return bank, float(values[-1])


def save_bank(
    bank: LearnableQueryBank, path: Union[str, Path], zeta: float = ZETA_INIT
) -> Path:
    path = Path(path)
    ensure_output_dir(path.parent)
    try:
        path.write_bytes(dump_bank(bank, zeta))
    except OSError as e:
        raise ReportIOError(path, str(e)) from e
    return path


def read_bank(path: Union[str, Path]) -> Tuple[LearnableQueryBank, float]:
    return load_bank(Path(path).read_bytes())
