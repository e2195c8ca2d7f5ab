"""
Transformer FLOPs accounting for the pruned and unpruned pipelines.

A multiply-accumulate counts as 2 FLOPs. Per decoder layer with n tokens,
hidden size d, MLP size f and (for grouped-query attention) key/value width
d_kv = d * kv_heads / heads:

    projections  2 * (2*n*d*d + 2*n*d*d_kv)     Q, O and K, V
    attention    2 * (2*n*n*d)                  Q K^T and A V
    mlp          2 * (3*n*d*f)                  gated: gate, up, down
                 2 * (2*n*d*f)                  plain: up, down

summed over layers. The vision encoder and the action head are fixed
overheads that token pruning does not change.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional

from vtprune.utils.exceptions import ArgumentError

logger = logging.getLogger(__name__)

REFERENCE_BASELINE_TFLOPS = 8.8
BASELINE_VISUAL_TOKENS = 512
PRUNED_VISUAL_TOKENS = 78
DEFAULT_TEXT_TOKENS = 30
DEFAULT_HEAD_FLOPS = 2.0e10

FORMULA = (
    "per layer: 2*(2nd^2 + 2nd*d_kv) + 2*(2n^2 d) + 2*(3ndf gated | 2ndf); "
    "total = encoder + sum(layers) + head"
)


@dataclass(frozen=True)
class ArchSpec:
    """Decoder shape plus the fixed encoder and head costs (in FLOPs)."""

    layers: int
    hidden: int
    ffn: int
    heads: int
    kv_equivalent: bool = True
    kv_heads: Optional[int] = None
    gated_mlp: bool = True
    encoder_flops: float = 0.0
    head_flops: float = 0.0

    def __post_init__(self):
        for name in ("layers", "hidden", "ffn", "heads"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"ArchSpec.{name} must be >= 1")
        if self.encoder_flops < 0 or self.head_flops < 0:
            raise ArgumentError("overhead FLOPs must be >= 0")
        if not self.kv_equivalent and not (
            self.kv_heads and 1 <= self.kv_heads <= self.heads
        ):
            raise ArgumentError("kv_heads must be in [1, heads]")

    @property
    def kv_width(self) -> float:
        if self.kv_equivalent:
            return float(self.hidden)
        return self.hidden * self.kv_heads / self.heads

    @property
    def overhead_flops(self) -> float:
        return self.encoder_flops + self.head_flops


# LLaMA-2-7B decoder; overheads are filled in by calibrate_overheads
LLAMA2_7B = ArchSpec(layers=32, hidden=4096, ffn=11008, heads=32)


@dataclass(frozen=True)
class CostReport:
    """Cost of one pipeline configuration."""

    variant: str
    visual_tokens: int
    text_tokens: int
    total_flops: float
    decoder_flops: float
    attention_quadratic_flops: float
    reduction_vs_baseline: float = 0.0
    retained_mean: Optional[float] = None
    retained_std: float = 0.0

    @property
    def total_tflops(self) -> float:
        return self.total_flops / 1e12


def _layer_terms(n: int, arch: ArchSpec):
    d, f = arch.hidden, arch.ffn
    projections = 2 * (2 * n * d * d + 2 * n * d * arch.kv_width)
    attention = 2 * (2 * n * n * d)
    mlp = 2 * ((3 if arch.gated_mlp else 2) * n * d * f)
    return projections, attention, mlp


def decoder_flops(n_tokens: int, arch: ArchSpec) -> float:
    """
    FLOPs of the decoder stack on ``n_tokens`` tokens.

    Raises:
        ArgumentError: If ``n_tokens`` is below 1
    """
    if n_tokens < 1:
        raise ArgumentError(f"n_tokens must be >= 1, got {n_tokens}")
    return arch.layers * sum(_layer_terms(n_tokens, arch))


def attention_quadratic_flops(n_tokens: int, arch: ArchSpec) -> float:
    """The n^2 part of ``decoder_flops``."""
    return arch.layers * _layer_terms(n_tokens, arch)[1]


def reduction(total: float, baseline_total: float) -> float:
    """Fraction of ``baseline_total`` saved by ``total``."""
    if baseline_total <= 0:
        raise ArgumentError("baseline cost must be positive")
    return 1.0 - total / baseline_total


def pipeline_cost(
    visual_tokens: int,
    text_tokens: int,
    arch: ArchSpec,
    baseline: Optional[CostReport] = None,
    variant: str = "",
    retained_std: float = 0.0,
) -> CostReport:
    """
    Encoder + decoder + head cost of one forward pass.

    Args:
        visual_tokens: Visual tokens entering the decoder
        text_tokens: Text tokens entering the decoder
        arch: Architecture and overheads
        baseline: Report to compute the reduction against (0 when absent)
        variant: Label carried into the report
        retained_std: Spread of the visual token count, for reporting

    Returns:
        CostReport: Cost breakdown
    """
    if visual_tokens < 0 or text_tokens < 0:
        raise ArgumentError("token counts must be >= 0")
    n = visual_tokens + text_tokens
    decoder = decoder_flops(n, arch) if n else 0.0
    quadratic = attention_quadratic_flops(n, arch) if n else 0.0
    total = arch.encoder_flops + decoder + arch.head_flops
    saved = reduction(total, baseline.total_flops) if baseline else 0.0
    return CostReport(
        variant=variant,
        visual_tokens=visual_tokens,
        text_tokens=text_tokens,
        total_flops=total,
        decoder_flops=decoder,
        attention_quadratic_flops=quadratic,
        reduction_vs_baseline=saved,
        retained_mean=float(visual_tokens),
        retained_std=retained_std,
    )


def calibrate_overheads(
    arch: ArchSpec,
    visual_tokens: int = BASELINE_VISUAL_TOKENS,
    text_tokens: int = DEFAULT_TEXT_TOKENS,
    target_flops: float = REFERENCE_BASELINE_TFLOPS * 1e12,
    head_flops: float = DEFAULT_HEAD_FLOPS,
) -> ArchSpec:
    """
    Set the encoder overhead so the baseline pipeline costs ``target_flops``.

    The head overhead is fixed at ``head_flops``; the encoder absorbs the
    rest of the gap between the decoder cost and the target.

    Raises:
        ArgumentError: If the decoder alone already exceeds the target
    """
    decoder = decoder_flops(visual_tokens + text_tokens, arch)
    encoder = target_flops - decoder - head_flops
    if encoder < 0:
        raise ArgumentError(
            f"decoder alone costs {decoder:.3e} FLOPs, above the target"
        )
    logger.debug(
        "calibrated encoder overhead %.4e FLOPs (decoder %.4e)",
        encoder,
        decoder,
    )
    return replace(arch, encoder_flops=encoder, head_flops=head_flops)
