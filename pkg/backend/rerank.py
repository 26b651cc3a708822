"""
Stay-Time Re-ranker
Two-tower scorer trained with a play-time weighted in-batch softmax; shrinks
each retriever's candidate pool to a fixed budget
"""

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from errors import InvalidInputError
from event_log import events_by_user, is_qualifying
from trainer import ItemEmbeddingTable, pool_user_representation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RerankSample:
    user_id: int
    behavior_item_ids: tuple
    item_id: int
    playtime_s: float
    negative_playtime_s: float = 2.0
    playtime_clip_s: float = 300.0

    @property
    def is_positive(self):
        return self.playtime_s >= self.negative_playtime_s

    @property
    def weight(self):
        """Clipped play time for positives; negatives only serve as in-batch columns"""
        if not self.is_positive:
            return 0.0
        return min(self.playtime_s, self.playtime_clip_s)


def make_rerank_samples(events, cfg, rng):
    samples = []
    for user_id, user_events in sorted(events_by_user(events).items()):
        history = deque(maxlen=2500)
        for event in user_events:
            if history:
                pool = np.fromiter(history, dtype=np.int64, count=len(history))
                if pool.size > cfg.max_behaviors:
                    pool = pool[np.sort(rng.choice(pool.size, cfg.max_behaviors, replace=False))]
                samples.append(
                    RerankSample(
                        user_id=user_id,
                        behavior_item_ids=tuple(int(i) for i in pool),
                        item_id=event.item_id,
                        playtime_s=event.playtime_s,
                        negative_playtime_s=cfg.negative_playtime_s,
                        playtime_clip_s=cfg.playtime_clip_s,
                    )
                )
            if is_qualifying(event):
                history.append(event.item_id)
    return samples


def _check_batch(user_vecs, item_vecs, weights):
    U = np.asarray(user_vecs, dtype=np.float64)
    V = np.asarray(item_vecs, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if U.ndim != 2 or U.shape != V.shape or w.shape != (U.shape[0],):
        raise InvalidInputError(f"batch shapes disagree: users {U.shape}, items {V.shape}, weights {w.shape}")
    if U.shape[0] < 2:
        raise InvalidInputError("in-batch softmax needs at least two rows")
    return U, V, w


def weighted_inbatch_softmax_loss(user_vecs, item_vecs, weights):
    """-sum_p w_p * log softmax(u_p . v_q over q)[p]"""
    U, V, w = _check_batch(user_vecs, item_vecs, weights)
    logits = U @ V.T
    log_diag = np.diag(logits) - logsumexp(logits, axis=1)
    return float(-np.sum(w * log_diag))


def weighted_inbatch_softmax_grad(user_vecs, item_vecs, weights):
    """Returns (loss, dL/dU, dL/dV)"""
    U, V, w = _check_batch(user_vecs, item_vecs, weights)
    logits = U @ V.T
    log_diag = np.diag(logits) - logsumexp(logits, axis=1)
    G = w[:, None] * (softmax(logits, axis=1) - np.eye(U.shape[0]))
    return float(-np.sum(w * log_diag)), G @ V, G.T @ U


def rerank(user_vec, candidates, embeddings, budget=1000):
    """Top-budget candidate ids by inner product, ties by ascending id"""
    ids = np.asarray(sorted({c for c in candidates if c in embeddings}), dtype=np.int64)
    dropped = len(set(candidates)) - ids.size
    if dropped:
        logger.debug(f"⚠️ {dropped} candidates without re-rank embedding dropped")
    if ids.size == 0 or user_vec is None:
        return []
    scores = embeddings.matrix[embeddings.rows(ids.tolist())] @ np.asarray(user_vec, dtype=np.float64)
    order = np.lexsort((ids, -scores))[:budget]
    return [int(i) for i in ids[order]]


class StayTimeReranker:
    """One shared instance scores the candidates of every Trinity retriever"""

    def __init__(self, table, cfg):
        self.table = table
        self.cfg = cfg
        self.loss_curve = []
        self.epochs_done = 0

    @classmethod
    def fresh(cls, item_ids, cfg):
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        return cls(ItemEmbeddingTable.random(item_ids, cfg.embedding_dim, rng), cfg)

    def user_vector(self, item_ids):
        known = [i for i in item_ids if i in self.table]
        if not known:
            return None
        return pool_user_representation(self.table.matrix[self.table.rows(known)])

    def train_step(self, batch):
        E = self.table.matrix
        behavior_rows = [self.table.rows(s.behavior_item_ids) for s in batch]
        U = np.stack([E[rows].mean(axis=0) for rows in behavior_rows])
        item_rows = self.table.rows([s.item_id for s in batch])
        V = E[item_rows]
        w = np.asarray([s.weight for s in batch])
        loss, dU, dV = weighted_inbatch_softmax_grad(U, V, w)

        n = len(batch)
        if self.cfg.learning_rate > 0:
            grad = np.zeros_like(E)
            np.add.at(grad, item_rows, dV / n)
            for s, rows in enumerate(behavior_rows):
                np.add.at(grad, rows, dU[s] / (n * rows.size))
            self.table.matrix -= self.cfg.learning_rate * grad
        return loss / n

    def train_epoch(self, samples):
        samples = [s for s in samples if s.behavior_item_ids and s.item_id in self.table]
        if not samples:
            raise InvalidInputError("re-rank training stream is empty")
        rng = np.random.default_rng([self.cfg.seed, self.epochs_done])
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(samples), self.cfg.batch_size):
            batch = [samples[i] for i in order[start:start + self.cfg.batch_size]]
            if len(batch) < 2:
                continue
            losses.append(self.train_step(batch))
        self.loss_curve.extend(losses)
        self.epochs_done += 1
        logger.info(f"⏱️ Re-rank epoch {self.epochs_done}: mean loss {np.mean(losses) if losses else 0.0:.4f}")
        return losses

    def fit(self, samples):
        for _ in range(self.cfg.epochs):
            self.train_epoch(samples)
        return self

    def rerank(self, behavior_item_ids, candidates, budget=None):
        budget = budget if budget is not None else self.cfg.budget
        return rerank(self.user_vector(behavior_item_ids), candidates, self.table, budget)
