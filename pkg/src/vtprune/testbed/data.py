"""Synthetic vision-language-action samples with planted informative tokens.

Each sample mentions ``informative_tokens`` distinct words from a fixed
vocabulary in its language tokens. The visual tokens at the planted
positions carry the matching word key plus a value vector; every other
patch token is Gaussian noise confined to a background subspace. Word
keys, value directions and the background subspace are mutually
orthogonal. The action target is the mean of the planted values, so it
depends on the informative tokens alone.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from vtprune.core.numeric import Matrix, Rng
from vtprune.core.pruner import TokenBatch
from vtprune.utils.config import RunConfig
from vtprune.utils.exceptions import ArgumentError

logger = logging.getLogger(__name__)

CLS_INDEX = 0


@dataclass(frozen=True)
class SyntheticTask:
    """Word keys, value directions and background basis of a run.

    The three sets of rows come from one orthonormal basis: a token's value
    never changes how well it matches a word, and background noise matches
    no word at all.
    """

    keys: np.ndarray
    value_dirs: np.ndarray
    background: np.ndarray

    @property
    def vocab_size(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]


@dataclass
class SyntheticSample:
    """Raw (un-embedded) tokens of one episode and its action target."""

    visual: TokenBatch
    language: TokenBatch
    informative_set: np.ndarray
    target: np.ndarray

    @property
    def n_visual(self) -> int:
        return self.visual.length


def build_task(cfg: RunConfig, rng: Rng) -> SyntheticTask:
    """Split a random orthonormal basis into values, keys and background."""
    dim, actions, vocab = cfg.dim, cfg.action_dim, cfg.vocab_size
    if actions + vocab > dim:
        raise ArgumentError(
            f"action_dim + vocab_size must be <= dim, "
            f"got {actions} + {vocab} > {dim}"
        )
    if vocab < cfg.informative_tokens:
        raise ArgumentError("vocab_size must be >= informative_tokens")

    basis, _ = np.linalg.qr(rng.normal((dim, dim)))
    rows = basis.T
    return SyntheticTask(
        keys=rows[actions : actions + vocab] * cfg.signal_scale,
        value_dirs=rows[:actions],
        background=rows[actions + vocab :],
    )


def default_task(cfg: RunConfig) -> SyntheticTask:
    """The task every stream of a run with ``cfg.seed`` agrees on."""
    return build_task(cfg, Rng(cfg.seed).split("task"))


def generate_sample(
    cfg: RunConfig, rng: Rng, task: Optional[SyntheticTask] = None
) -> SyntheticSample:
    """
    Generate one episode.

    Args:
        cfg: Run configuration (sizes, planted count, noise scale)
        rng: Stream for this sample
        task: Shared vocabulary; derived from ``cfg.seed`` when omitted

    Returns:
        SyntheticSample: Raw visual/language tokens, planted set and target

    Raises:
        ArgumentError: If the planted count is not below the token count
    """
    n_patches, planted = cfg.visual_tokens, cfg.informative_tokens
    if not 1 <= planted < n_patches:
        raise ArgumentError(
            f"need 1 <= informative_tokens < visual_tokens, "
            f"got {planted} and {n_patches}"
        )
    if task is None:
        task = default_task(cfg)

    words = rng.choice(task.vocab_size, planted)
    slots = np.sort(rng.choice(n_patches, planted))
    values = rng.uniform((planted, cfg.action_dim)) * 2.0 - 1.0

    noise = rng.normal((n_patches, len(task.background)), cfg.noise_scale)
    patches = noise @ task.background
    patches[slots] = task.keys[words] + values @ task.value_dirs

    lang_words = words[np.arange(cfg.language_tokens) % planted]
    language = task.keys[lang_words]

    offset = 1 if cfg.with_cls else 0
    if cfg.with_cls:
        cls_row = patches.mean(axis=0, keepdims=True)
        visual = np.concatenate([cls_row, patches], axis=0)
    else:
        visual = patches

    n_visual = n_patches + offset
    return SyntheticSample(
        visual=TokenBatch.from_embeddings(
            Matrix(visual), CLS_INDEX if cfg.with_cls else None
        ),
        language=TokenBatch.from_embeddings(
            Matrix(language), first_position=n_visual
        ),
        informative_set=slots + offset,
        target=values.mean(axis=0),
    )
