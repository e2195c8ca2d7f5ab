"""A miniature vision-language-action model with a pluggable token pruner.

Raw tokens pass through a shared linear embedder, the visual tokens are
optionally pruned, and the remaining visual tokens, the language tokens
and one action token run through a small pre-norm transformer decoder.
The action token's final state is read out linearly as the action.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from vtprune.core.learnable import (
    AttentionReduce,
    AttentionSummary,
    LearnableQueryBank,
    aggregate_attention,
    init_bank,
    score_llm,
    score_vision,
)
from vtprune.core.numeric import (
    Matrix,
    Rng,
    add,
    concat_rows,
    gather_rows,
    inv_sqrt,
    matmul,
    no_grad,
    relu,
    rms_normalize,
    scale,
    softmax_rows,
    transpose,
)
from vtprune.core.pruner import (
    NoiseDistribution,
    PruneMode,
    ScoreMatrix,
    SelectionResult,
    TokenBatch,
    assemble_pruned,
    prune,
    select_infer,
    select_train,
)
from vtprune.testbed.data import SyntheticSample
from vtprune.utils.config import RunConfig
from vtprune.utils.exceptions import ShapeError

logger = logging.getLogger(__name__)


class PrunerKind(str, Enum):
    PARAMETER_FREE = "parameter-free"
    VISION_LEARNABLE = "vision-learnable"
    LLM_LEARNABLE = "llm-learnable"
    NONE = "none"


@dataclass
class ForwardResult:
    prediction: Matrix
    selection: Optional[SelectionResult]
    kept_count: int


class DecoderLayer:
    """Single-head pre-norm attention block followed by a ReLU MLP."""

    def __init__(self, dim: int, rng: Rng):
        std = inv_sqrt(dim)
        hidden = 2 * dim
        self.attn_gain = Matrix.ones(1, dim)
        self.w_q = Matrix(rng.normal((dim, dim), std))
        self.w_k = Matrix(rng.normal((dim, dim), std))
        self.w_v = Matrix(rng.normal((dim, dim), std))
        self.w_o = Matrix(rng.normal((dim, dim), std))
        self.mlp_gain = Matrix.ones(1, dim)
        self.w_in = Matrix(rng.normal((dim, hidden), std))
        self.b_in = Matrix.zeros(1, hidden)
        self.w_out = Matrix(rng.normal((hidden, dim), inv_sqrt(hidden)))
        self.b_out = Matrix.zeros(1, dim)
        self.dim = dim

    def parameters(self) -> List[Matrix]:
        return [
            self.attn_gain,
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.mlp_gain,
            self.w_in,
            self.b_in,
            self.w_out,
            self.b_out,
        ]

    def queries_keys(self, x: Matrix):
        normed = rms_normalize(x, self.attn_gain)
        return normed, matmul(normed, self.w_q), matmul(normed, self.w_k)

    def __call__(self, x: Matrix) -> Matrix:
        normed, q, k = self.queries_keys(x)
        logits = scale(matmul(q, transpose(k)), inv_sqrt(self.dim))
        mixed = matmul(softmax_rows(logits), matmul(normed, self.w_v))
        x = add(x, matmul(mixed, self.w_o))
        h = rms_normalize(x, self.mlp_gain)
        h = relu(add(matmul(h, self.w_in), self.b_in))
        return add(x, add(matmul(h, self.w_out), self.b_out))


class ToyModel:
    """
    Embedder, decoder stack and action head around one pruning site.

    Args:
        cfg: Run configuration (sizes, variant, pruning layer)
        rng: Stream used for weight initialization
    """

    def __init__(self, cfg: RunConfig, rng: Rng):
        dim = cfg.dim
        self.cfg = cfg
        self.kind = PrunerKind(cfg.variant)
        self.distribution = NoiseDistribution(cfg.noise_dist)
        self.dim = dim
        self.n_visual = cfg.visual_tokens + (1 if cfg.with_cls else 0)
        n_positions = self.n_visual + cfg.language_tokens + 1

        # Starts as the identity; the pruner first sees raw token geometry
        self.w_embed = Matrix.identity(dim)
        self.b_embed = Matrix.zeros(1, dim)
        self.positions = Matrix(rng.normal((n_positions, dim), 0.02))
        self.action_token = Matrix(rng.normal((1, dim), 0.1))
        self.layers = [
            DecoderLayer(dim, rng) for _ in range(cfg.decoder_layers)
        ]
        self.w_head = Matrix(rng.normal((dim, cfg.action_dim), 0.01))
        self.b_head = Matrix.zeros(1, cfg.action_dim)

        self.bank: Optional[LearnableQueryBank] = None
        self.zeta: Optional[Matrix] = None
        if self.kind in (
            PrunerKind.VISION_LEARNABLE,
            PrunerKind.LLM_LEARNABLE,
        ):
            self.bank = init_bank(cfg.n_queries, dim, rng)
        if self.kind is PrunerKind.LLM_LEARNABLE:
            self.zeta = Matrix([[1.0]])

    def parameters(self) -> List[Matrix]:
        params = [
            self.w_embed,
            self.b_embed,
            self.positions,
            self.action_token,
        ]
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend([self.w_head, self.b_head])
        if self.bank is not None:
            params.extend(self.bank.parameters())
        if self.zeta is not None:
            params.append(self.zeta)
        return params

    def named_parameters(self) -> Dict[str, Matrix]:
        names = ["w_embed", "b_embed", "positions", "action_token"]
        for i in range(len(self.layers)):
            names.extend(
                f"layer{i + 1}.{name}"
                for name in (
                    "attn_gain",
                    "w_q",
                    "w_k",
                    "w_v",
                    "w_o",
                    "mlp_gain",
                    "w_in",
                    "b_in",
                    "w_out",
                    "b_out",
                )
            )
        names.extend(["w_head", "b_head"])
        if self.bank is not None:
            names.extend(
                ["bank.queries", "bank.query_gain", "bank.token_gain"]
            )
        if self.zeta is not None:
            names.append("zeta")
        return dict(zip(names, self.parameters()))

    def _check(self, sample: SyntheticSample) -> None:
        if sample.visual.dim != self.dim or sample.language.dim != self.dim:
            raise ShapeError(
                f"model width {self.dim}, sample widths "
                f"{sample.visual.dim}/{sample.language.dim}"
            )
        if sample.visual.length != self.n_visual:
            raise ShapeError(
                f"model expects {self.n_visual} visual tokens, "
                f"got {sample.visual.length}"
            )

    def embed(self, sample: SyntheticSample):
        """Embedded visual and language batches (original position IDs)."""
        visual = TokenBatch(
            add(matmul(sample.visual.embeddings, self.w_embed), self.b_embed),
            sample.visual.position_ids,
            sample.visual.cls_index,
        )
        language = TokenBatch(
            add(
                matmul(sample.language.embeddings, self.w_embed),
                self.b_embed,
            ),
            sample.language.position_ids,
        )
        return visual, language

    def _with_positions(self, batch: TokenBatch) -> Matrix:
        return add(
            batch.embeddings, gather_rows(self.positions, batch.position_ids)
        )

    def _sequence(self, visual: TokenBatch, language: TokenBatch) -> Matrix:
        action = add(
            self.action_token,
            gather_rows(self.positions, [self.positions.rows - 1]),
        )
        return concat_rows(
            self._with_positions(visual),
            self._with_positions(language),
            action,
        )

    def _readout(self, x: Matrix) -> Matrix:
        last = gather_rows(x, [x.rows - 1])
        return add(matmul(last, self.w_head), self.b_head)

    def _select(
        self,
        scores: ScoreMatrix,
        mode: PruneMode,
        alpha: float,
        rng: Optional[Rng],
    ) -> SelectionResult:
        if mode is PruneMode.INFER:
            return select_infer(scores)
        return select_train(scores, alpha, rng, self.distribution)

    def _keep(
        self, batch: TokenBatch, selection: SelectionResult, mode: PruneMode
    ) -> TokenBatch:
        if mode is PruneMode.INFER:
            return batch.take(selection.kept_indices)
        return assemble_pruned(batch, selection)

    def text_attention(self, x: Matrix, n_visual: int, layer: DecoderLayer):
        """Text-to-patch attention of ``layer`` as a 1 x text x patch array."""
        with no_grad():
            _, q, k = layer.queries_keys(x)
        n_text = self.cfg.language_tokens
        patch_rows = np.arange(n_visual)
        if self.cfg.with_cls:
            patch_rows = patch_rows[patch_rows != 0]
        text_q = q.data[n_visual : n_visual + n_text]
        logits = text_q @ k.data[patch_rows].T * inv_sqrt(self.dim)
        logits -= logits.max(axis=1, keepdims=True)
        weights = np.exp(logits)
        weights /= weights.sum(axis=1, keepdims=True)
        return weights[None]

    def attention_summary(
        self, x: Matrix, layer: DecoderLayer
    ) -> AttentionSummary:
        """Aggregate the text-to-patch attention ``layer`` sees in ``x``."""
        raw = self.text_attention(x, self.n_visual, layer)
        return aggregate_attention(
            raw, AttentionReduce(self.cfg.attn_reduce), zeta=self.zeta
        )

    def forward(
        self,
        sample: SyntheticSample,
        mode: PruneMode = PruneMode.INFER,
        alpha: float = 0.0,
        rng: Optional[Rng] = None,
    ) -> ForwardResult:
        """
        Predict the action for one sample.

        In train mode the prediction is differentiable through the
        straight-through indicator; in infer mode nothing is recorded.

        Raises:
            ShapeError: If the sample does not match the model sizes
        """
        mode = PruneMode(mode)
        self._check(sample)
        if mode is PruneMode.INFER:
            with no_grad():
                return self._forward(sample, mode, alpha, rng)
        return self._forward(sample, mode, alpha, rng)

    def _forward(self, sample, mode, alpha, rng) -> ForwardResult:
        visual, language = self.embed(sample)
        selection = None

        if self.kind is PrunerKind.PARAMETER_FREE:
            visual, selection = prune(
                visual, language, mode, alpha, rng, self.distribution
            )
        elif self.kind is PrunerKind.VISION_LEARNABLE:
            selection = self._select(
                score_vision(self.bank, visual), mode, alpha, rng
            )
            visual = self._keep(visual, selection, mode)

        x = self._sequence(visual, language)
        for depth, layer in enumerate(self.layers, start=1):
            layer_input = x
            x = layer(x)
            if (
                self.kind is PrunerKind.LLM_LEARNABLE
                and depth == self.cfg.prune_layer
            ):
                attn = self.attention_summary(layer_input, layer)
                x, visual, selection = self._prune_hidden(
                    x, visual, attn, mode, alpha, rng
                )

        return ForwardResult(self._readout(x), selection, visual.length)

    def _prune_hidden(self, x, visual, attn, mode, alpha, rng):
        n_visual = visual.length
        hidden = TokenBatch(
            gather_rows(x, np.arange(n_visual)),
            visual.position_ids,
            visual.cls_index,
        )
        selection = self._select(
            score_llm(self.bank, hidden, attn), mode, alpha, rng
        )
        kept = self._keep(hidden, selection, mode)
        rest = gather_rows(x, np.arange(n_visual, x.rows))
        return concat_rows(kept.embeddings, rest), kept, selection

    def forward_kept(
        self, sample: SyntheticSample, kept_indices: Sequence[int]
    ) -> Matrix:
        """
        Inference with an explicit kept set at the model's pruning site.

        The pruner is bypassed; ``kept_indices`` (sorted sequence indices)
        decide which visual tokens continue.
        """
        self._check(sample)
        kept = np.asarray(sorted(set(int(i) for i in kept_indices)))
        with no_grad():
            visual, language = self.embed(sample)
            if self.kind is not PrunerKind.LLM_LEARNABLE:
                visual = visual.take(kept)
            x = self._sequence(visual, language)
            for depth, layer in enumerate(self.layers, start=1):
                x = layer(x)
                if (
                    self.kind is PrunerKind.LLM_LEARNABLE
                    and depth == self.cfg.prune_layer
                ):
                    rest = Matrix(x.data[visual.length :])
                    x = Matrix(np.concatenate([x.data[kept], rest.data]))
            return self._readout(x)
