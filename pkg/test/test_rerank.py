import math

import numpy as np
import pytest

from config import RerankConfig
from conftest import make_event
from errors import InvalidInputError
from rerank import (
    RerankSample,
    StayTimeReranker,
    make_rerank_samples,
    rerank,
    weighted_inbatch_softmax_grad,
    weighted_inbatch_softmax_loss,
)
from trainer import ItemEmbeddingTable


def scalar_loss(U, V, w):
    total = 0.0
    for p in range(len(U)):
        logits = [sum(a * b for a, b in zip(U[p], V[q])) for q in range(len(V))]
        top = max(logits)
        log_norm = top + math.log(sum(math.exp(x - top) for x in logits))
        total -= w[p] * (logits[p] - log_norm)
    return total


class TestLoss:
    def test_uniform_softmax(self):
        # every logit is 1, so each row costs log 2
        U = np.array([[1.0, 0.0], [0.0, 1.0]])
        V = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert weighted_inbatch_softmax_loss(U, V, [2.0, 3.0]) == pytest.approx(5 * math.log(2))

    def test_zero_weights(self, rng):
        assert weighted_inbatch_softmax_loss(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), np.zeros(4)) == 0.0

    def test_matches_scalar_oracle(self, rng):
        U, V = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
        w = rng.uniform(0, 300, size=8)
        assert weighted_inbatch_softmax_loss(U, V, w) == pytest.approx(scalar_loss(U, V, w), rel=1e-10, abs=1e-8)

    def test_single_row_rejected(self):
        with pytest.raises(InvalidInputError):
            weighted_inbatch_softmax_loss(np.ones((1, 2)), np.ones((1, 2)), [1.0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            weighted_inbatch_softmax_loss(np.ones((3, 2)), np.ones((2, 2)), [1.0, 1.0, 1.0])

    def test_row_shift_invariance(self, rng):
        U, V = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        w = rng.uniform(1, 10, size=6)
        shift = rng.normal(size=6) * 50
        # an extra coordinate adds shift[p] to every logit of row p
        U_shifted = np.hstack([U, shift[:, None]])
        V_shifted = np.hstack([V, np.ones((6, 1))])
        assert weighted_inbatch_softmax_loss(U_shifted, V_shifted, w) == pytest.approx(
            weighted_inbatch_softmax_loss(U, V, w), abs=1e-10 * max(1.0, float(np.abs(w).sum()))
        )

    def test_gradient_matches_finite_differences(self, rng):
        U, V = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        w = rng.uniform(0.5, 5, size=5)
        _, dU, dV = weighted_inbatch_softmax_grad(U, V, w)
        eps = 1e-6
        for M, grad in ((U, dU), (V, dV)):
            numeric = np.zeros_like(M)
            for idx in np.ndindex(M.shape):
                orig = M[idx]
                M[idx] = orig + eps
                up = weighted_inbatch_softmax_loss(U, V, w)
                M[idx] = orig - eps
                down = weighted_inbatch_softmax_loss(U, V, w)
                M[idx] = orig
                numeric[idx] = (up - down) / (2 * eps)
            np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)


class TestRerank:
    def test_budget_covers_all(self):
        table = ItemEmbeddingTable([1, 2, 3], np.array([[1.0], [3.0], [2.0]]))
        assert rerank(np.array([1.0]), [1, 2, 3], table, budget=10) == [2, 3, 1]

    def test_budget_one(self):
        table = ItemEmbeddingTable([1, 2, 3], np.array([[1.0], [3.0], [2.0]]))
        assert rerank(np.array([1.0]), [3, 1, 2], table, budget=1) == [2]

    def test_ties_by_ascending_id(self):
        table = ItemEmbeddingTable([4, 7, 9], np.ones((3, 2)))
        assert rerank(np.ones(2), [9, 4, 7], table) == [4, 7, 9]

    def test_prefix_of_full_sort(self, rng):
        table = ItemEmbeddingTable.random(range(5000), 8, rng)
        user = rng.normal(size=8)
        scores = table.matrix @ user
        full = sorted(range(5000), key=lambda i: (-scores[i], i))
        assert rerank(user, range(5000), table, budget=1000) == full[:1000]

    def test_unknown_candidates_dropped(self, rng):
        table = ItemEmbeddingTable.random(range(3), 2, rng)
        assert sorted(rerank(rng.normal(size=2), [0, 1, 42], table)) == [0, 1]


class TestSamples:
    def test_labels_and_weights(self):
        short = RerankSample(0, (1,), 2, playtime_s=1.5)
        long = RerankSample(0, (1,), 2, playtime_s=900.0)
        medium = RerankSample(0, (1,), 2, playtime_s=42.0)
        assert not short.is_positive and short.weight == 0.0
        assert long.is_positive and long.weight == 300.0
        assert medium.weight == 42.0

    def test_samples_follow_qualifying_history(self, rng):
        events = [make_event(0, 1, 0), make_event(0, 2, 1, playtime_s=1.0), make_event(0, 3, 2)]
        samples = make_rerank_samples(events, RerankConfig(), rng)
        assert [(s.item_id, s.behavior_item_ids) for s in samples] == [(2, (1,)), (3, (1,))]
        assert samples[0].weight == 0.0


class TestStayTimeReranker:
    def samples(self):
        rng = np.random.default_rng(0)
        out = []
        for user in range(20):
            history = tuple(int(i) for i in rng.choice(30, size=4, replace=False))
            out.append(RerankSample(user, history, int(rng.integers(30)), float(rng.uniform(0, 400))))
        return out

    def test_training_is_deterministic(self):
        cfg = RerankConfig(embedding_dim=4, batch_size=8, epochs=2, seed=5)
        first = StayTimeReranker.fresh(range(30), cfg).fit(self.samples())
        second = StayTimeReranker.fresh(range(30), cfg).fit(self.samples())
        np.testing.assert_array_equal(first.table.matrix, second.table.matrix)
        assert len(first.loss_curve) == 2 * 3

    def test_training_lowers_loss(self):
        cfg = RerankConfig(embedding_dim=8, batch_size=20, epochs=30, learning_rate=1e-3, seed=2)
        reranker = StayTimeReranker.fresh(range(30), cfg).fit(self.samples())
        assert reranker.loss_curve[-1] < reranker.loss_curve[0]

    def test_empty_stream_rejected(self):
        with pytest.raises(InvalidInputError):
            StayTimeReranker.fresh(range(3), RerankConfig()).train_epoch([])

    def test_rerank_uses_pooled_history(self):
        table = ItemEmbeddingTable([1, 2, 3], np.array([[1.0, 0.0], [0.0, 1.0], [0.9, 0.1]]))
        reranker = StayTimeReranker(table, RerankConfig(budget=2))
        assert reranker.rerank([1], [2, 3, 1]) == [1, 3]
