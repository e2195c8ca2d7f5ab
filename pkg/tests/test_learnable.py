"""Tests for the learnable-query pruners."""

import numpy as np
import pytest

from vtprune.core.gradcheck import check_gradients
from vtprune.core.learnable import (
    DEFAULT_NUM_QUERIES,
    AttentionReduce,
    AttentionSummary,
    LearnableQueryBank,
    aggregate_attention,
    dump_bank,
    init_bank,
    load_bank,
    read_bank,
    save_bank,
    score_llm,
    score_vision,
)
from vtprune.core.numeric import Matrix, Rng, mul, softmax_rows, sum_all
from vtprune.core.pruner import TokenBatch, select_infer
from vtprune.utils.exceptions import ContractError, ShapeError


@pytest.fixture
def visual():
    """Ten patch tokens plus CLS, width six."""
    data = np.random.default_rng(0).normal(size=(11, 6))
    return TokenBatch(Matrix(data), np.arange(11), 0)


def random_attention(rng, n_patches):
    weights = rng.uniform(size=(1, n_patches)) + 0.1
    return weights / weights.sum()


class TestQueryBank:
    """Tests for init_bank and the bank container."""

    def test_default_query_count(self):
        """Test the documented default number of queries."""
        bank = init_bank(dim=8, rng=Rng(0))
        assert bank.n_queries == DEFAULT_NUM_QUERIES == 128
        assert bank.dim == 8
        assert np.array_equal(bank.query_gain.data, np.ones((1, 8)))

    def test_more_queries_than_tokens(self, visual):
        """Test a bank larger than the patch set is rejected."""
        bank = init_bank(11, 6, Rng(0))
        with pytest.raises(ContractError):
            score_vision(bank, visual)

    def test_gain_shape(self):
        """Test gains must match the query width."""
        with pytest.raises(ShapeError):
            LearnableQueryBank(
                Matrix.ones(2, 3), Matrix.ones(1, 2), Matrix.ones(1, 3)
            )


class TestScoring:
    """Tests for score_vision and score_llm."""

    def test_zero_zeta_matches_vision_scores(self, visual):
        """Test the attention term vanishes when its weight is zero."""
        rng = np.random.default_rng(1)
        bank = init_bank(4, 6, Rng(1))
        attn = AttentionSummary(
            Matrix(random_attention(rng, 10)), Matrix([[0.0]])
        )
        llm = score_llm(bank, visual, attn)
        vision = score_vision(bank, visual)
        assert np.array_equal(llm.values.data, vision.values.data)
        assert llm.column_index.tolist() == list(range(1, 11))

    def test_kept_count_bounded_by_queries(self, visual):
        """Test at most N_q patch tokens plus CLS survive."""
        for seed in range(50):
            bank = init_bank(3, 6, Rng(seed))
            selection = select_infer(score_vision(bank, visual))
            assert selection.count <= 4
            assert 0 in selection.kept_indices

    def test_attention_width_mismatch(self, visual):
        """Test attention must cover every patch token."""
        bank = init_bank(2, 6, Rng(2))
        attn = AttentionSummary(Matrix(np.full((1, 4), 0.25)))
        with pytest.raises(ShapeError):
            score_llm(bank, visual, attn)

    def test_bank_and_zeta_gradients(self, visual):
        """Test queries, both gains and zeta against central differences."""
        rng = np.random.default_rng(3)
        bank = init_bank(4, 6, Rng(3))
        bank.query_gain = Matrix(rng.uniform(0.5, 1.5, size=(1, 6)))
        scores = Matrix(random_attention(rng, 10))
        weights = Matrix(rng.normal(size=(4, 10)))

        def loss(queries, query_gain, token_gain, zeta):
            candidate = LearnableQueryBank(queries, query_gain, token_gain)
            values = score_llm(
                candidate, visual, AttentionSummary(scores, zeta)
            ).values
            return sum_all(mul(weights, softmax_rows(values)))

        leaves = [
            bank.queries,
            bank.query_gain,
            bank.token_gain,
            Matrix([[0.7]]),
        ]
        assert check_gradients(loss, leaves) < 1e-4


class TestAggregateAttention:
    """Tests for collapsing raw attention maps."""

    def test_mean_and_max(self):
        """Test both reductions on a two-head map."""
        raw = np.array(
            [
                [[0.5, 0.5, 0.0], [1.0, 0.0, 0.0]],
                [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            ]
        )
        mean = aggregate_attention(raw, AttentionReduce.MEAN)
        assert np.allclose(mean.scores.data, [[0.375, 0.375, 0.25]])
        strongest = aggregate_attention(raw, AttentionReduce.MAX)
        assert np.allclose(strongest.scores.data, [[0.75, 0.5, 0.5]])
        assert mean.zeta.item() == 1.0

    def test_rejects_non_distributions(self):
        """Test negative or unnormalized rows raise."""
        with pytest.raises(ContractError):
            aggregate_attention(np.array([[[0.5, 0.6]]]))
        with pytest.raises(ContractError):
            aggregate_attention(np.array([[[1.5, -0.5]]]))
        with pytest.raises(ContractError):
            aggregate_attention(np.array([[0.5, 0.5]]))


class TestBankSerialization:
    """Tests for the bank binary format."""

    def test_layout_and_restore(self, tmp_path):
        """Test the header, payload size and a save/read cycle."""
        bank = init_bank(5, 3, Rng(4))
        payload = dump_bank(bank, zeta=0.25)
        assert payload[:16] == (5).to_bytes(8, "little") + (3).to_bytes(
            8, "little"
        )
        assert len(payload) == 16 + 8 * (5 * 3 + 2 * 3 + 1)

        path = save_bank(bank, tmp_path / "nested" / "bank.bin", zeta=0.25)
        restored, zeta = read_bank(path)
        assert zeta == 0.25
        assert np.array_equal(restored.queries.data, bank.queries.data)
        assert np.array_equal(restored.token_gain.data, bank.token_gain.data)

    def test_truncated_payload(self):
        """Test short payloads are rejected."""
        payload = dump_bank(init_bank(2, 2, Rng(5)))
        with pytest.raises(ContractError):
            load_bank(payload[:10])
        with pytest.raises(ContractError):
            load_bank(payload[:-8])
