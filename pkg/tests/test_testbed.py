"""Tests for the synthetic task and the toy model."""

from types import SimpleNamespace

import numpy as np
import pytest

from vtprune.core.gradcheck import check_gradients
from vtprune.core.numeric import (
    GradientContext,
    Matrix,
    Rng,
    mean_all,
    square,
    sub,
)
from vtprune.core.pruner import PruneMode
from vtprune.testbed.data import default_task, generate_sample
from vtprune.testbed.model import PrunerKind, ToyModel
from vtprune.utils.config import RunConfig
from vtprune.utils.exceptions import ArgumentError, ShapeError

from tests.conftest import SMALL

VARIANTS = ["parameter-free", "vision-learnable", "llm-learnable", "none"]


def small(**overrides):
    return RunConfig(**{**SMALL, **overrides})


def mse(model, sample, mode=PruneMode.TRAIN, alpha=0.3, seed=5):
    result = model.forward(sample, mode, alpha, Rng(seed))
    return mean_all(square(sub(result.prediction, Matrix(sample.target))))


class TestGenerateSample:
    """Tests for generate_sample."""

    def test_same_seed_same_sample(self, small_cfg):
        """Test determinism."""
        a = generate_sample(small_cfg, Rng(3))
        b = generate_sample(small_cfg, Rng(3))
        assert np.array_equal(
            a.visual.embeddings.data, b.visual.embeddings.data
        )
        assert np.array_equal(a.target, b.target)
        assert a.informative_set.tolist() == b.informative_set.tolist()

    def test_shapes_and_positions(self, small_cfg):
        """Test token counts, CLS placement and position IDs."""
        sample = generate_sample(small_cfg, Rng(0))
        assert sample.visual.length == 9
        assert sample.visual.cls_index == 0
        assert sample.language.length == 3
        assert sample.language.position_ids.tolist() == [9, 10, 11]
        assert len(sample.informative_set) == 2
        assert 0 not in sample.informative_set
        assert sample.target.shape == (2,)

    def test_planted_count_too_large(self):
        """Test k* >= L_v is an argument error."""
        with pytest.raises(ArgumentError):
            generate_sample(
                SimpleNamespace(visual_tokens=4, informative_tokens=4), Rng(0)
            )
        with pytest.raises(ArgumentError):
            small(informative_tokens=8)

    def test_noise_free_target_is_recoverable(self):
        """Test the target follows from the planted tokens alone."""
        cfg = small(
            noise_scale=0.0, informative_tokens=7, vocab_size=8, dim=10
        )
        task = default_task(cfg)
        sample = generate_sample(cfg, Rng(1), task)
        planted = sample.visual.embeddings.data[sample.informative_set]
        values = planted @ task.value_dirs.T
        assert np.allclose(values.mean(axis=0), sample.target, atol=1e-12)

    def test_background_is_uncorrelated(self):
        """Test background tokens carry no information about the target."""
        cfg = RunConfig()
        task = default_task(cfg)
        rng = Rng(2)
        xs, ys = [], []
        for _ in range(10000):
            sample = generate_sample(cfg, rng, task)
            background = np.setdiff1d(
                np.arange(1, sample.n_visual), sample.informative_set
            )[0]
            token = sample.visual.embeddings.data[background]
            xs.append(token @ task.background[0])
            ys.append(sample.target[0])
        assert abs(np.corrcoef(xs, ys)[0, 1]) < 0.05

    def test_background_matches_no_word(self):
        """Test background tokens are orthogonal to keys and values."""
        cfg = RunConfig()
        task = default_task(cfg)
        sample = generate_sample(cfg, Rng(5), task)
        background = np.setdiff1d(
            np.arange(1, sample.n_visual), sample.informative_set
        )
        tokens = sample.visual.embeddings.data[background]
        assert np.abs(tokens @ task.keys.T).max() < 1e-12
        assert np.abs(tokens @ task.value_dirs.T).max() < 1e-12
        assert task.background.shape == (14, 32)

    def test_words_are_distinct(self):
        """Test the planted tokens never share a word."""
        cfg = RunConfig()
        task = default_task(cfg)
        for seed in range(20):
            sample = generate_sample(cfg, Rng(seed), task)
            planted = sample.visual.embeddings.data[sample.informative_set]
            words = np.argmax(planted @ task.keys.T, axis=1)
            assert len(set(words.tolist())) == cfg.informative_tokens


class TestToyModel:
    """Tests for ToyModel.forward."""

    def test_untrained_pruner_keeps_planted_tokens(self):
        """Test the initial embedder already isolates the planted tokens."""
        cfg = RunConfig()
        model = ToyModel(cfg, Rng(0))
        task = default_task(cfg)
        for seed in range(20):
            sample = generate_sample(cfg, Rng(seed), task)
            kept = model.forward(sample).selection.kept_indices
            expected = [0] + sample.informative_set.tolist()
            assert kept.tolist() == expected

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_forward_shapes(self, variant):
        """Test every variant predicts one action row."""
        cfg = small(variant=variant)
        model = ToyModel(cfg, Rng(0))
        result = model.forward(generate_sample(cfg, Rng(1)))
        assert result.prediction.shape == (1, cfg.action_dim)
        assert model.kind is PrunerKind(variant)
        if variant == "none":
            assert result.selection is None
            assert result.kept_count == 9
        else:
            assert result.kept_count == result.selection.count

    def test_learnable_kept_count_bounded(self):
        """Test learnable variants keep at most N_q tokens plus CLS."""
        for variant in ("vision-learnable", "llm-learnable"):
            cfg = small(variant=variant, n_queries=3)
            model = ToyModel(cfg, Rng(0))
            for seed in range(10):
                result = model.forward(generate_sample(cfg, Rng(seed)))
                assert result.kept_count <= 4

    def test_dimension_mismatch(self, small_cfg):
        """Test a sample of the wrong width is rejected."""
        model = ToyModel(small_cfg, Rng(0))
        wide = generate_sample(small(dim=16), Rng(0))
        with pytest.raises(ShapeError):
            model.forward(wide)

    def test_deterministic(self, small_cfg):
        """Test same seed and weights give identical outputs."""
        sample = generate_sample(small_cfg, Rng(4))
        a = ToyModel(small_cfg, Rng(9)).forward(
            sample, PruneMode.TRAIN, 0.5, Rng(1)
        )
        b = ToyModel(small_cfg, Rng(9)).forward(
            sample, PruneMode.TRAIN, 0.5, Rng(1)
        )
        assert np.array_equal(a.prediction.data, b.prediction.data)

    def test_all_kept_equals_unpruned(self, small_cfg):
        """Test keeping every token reproduces the unpruned model exactly."""
        pruned = ToyModel(small_cfg, Rng(6))
        unpruned = ToyModel(small(variant="none"), Rng(6))
        for seed in range(5):
            sample = generate_sample(small_cfg, Rng(seed))
            everything = np.arange(sample.n_visual)
            assert np.array_equal(
                pruned.forward_kept(sample, everything).data,
                unpruned.forward(sample).prediction.data,
            )

    def test_forward_kept_matches_own_selection(self):
        """Test forward_kept with the pruner's own set reproduces forward."""
        for variant in VARIANTS[:3]:
            cfg = small(variant=variant)
            model = ToyModel(cfg, Rng(2))
            sample = generate_sample(cfg, Rng(3))
            result = model.forward(sample)
            kept = result.selection.kept_indices
            assert np.allclose(
                model.forward_kept(sample, kept).data,
                result.prediction.data,
                atol=1e-12,
            )

    def test_infer_records_nothing(self, small_cfg):
        """Test inference leaves the gradient tape empty."""
        model = ToyModel(small_cfg, Rng(0))
        ctx = GradientContext()
        ctx.watch(*model.parameters())
        with ctx:
            model.forward(generate_sample(small_cfg, Rng(1)))
        assert len(ctx) == 0

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_every_parameter_gets_finite_gradient(self, variant):
        """Test end-to-end differentiability in train mode."""
        cfg = small(variant=variant)
        model = ToyModel(cfg, Rng(0))
        ctx = GradientContext()
        ctx.watch(*model.parameters())
        with ctx:
            loss = mse(model, generate_sample(cfg, Rng(1)))
        grads = ctx.backward(loss)
        named = model.named_parameters()
        assert len(named) == len(model.parameters())
        for name, param in named.items():
            assert np.all(np.isfinite(grads[param])), name
        assert np.any(grads[model.w_embed] != 0)
        assert np.any(grads[model.w_head] != 0)
        if model.bank is not None:
            assert np.any(grads[model.bank.queries] != 0)
        if model.zeta is not None:
            assert np.any(grads[model.zeta] != 0)

    @pytest.mark.parametrize(
        "variant", ["parameter-free", "vision-learnable", "llm-learnable"]
    )
    def test_gradients_after_pruning_site(self, variant):
        """Test parameters downstream of the pruner on a 6-token instance."""
        cfg = small(
            variant=variant,
            visual_tokens=5,
            language_tokens=2,
            dim=4,
            informative_tokens=2,
            vocab_size=2,
            n_queries=3,
        )
        model = ToyModel(cfg, Rng(7))
        sample = generate_sample(cfg, Rng(8))
        last = model.layers[-1]

        def loss(w_out, b_out, w_head, b_head):
            last.w_out, last.b_out = w_out, b_out
            model.w_head, model.b_head = w_head, b_head
            return mse(model, sample)

        leaves = [last.w_out, last.b_out, model.w_head, model.b_head]
        try:
            assert check_gradients(loss, leaves) < 1e-4
        finally:
            last.w_out, last.b_out = leaves[0], leaves[1]
            model.w_head, model.b_head = leaves[2], leaves[3]
