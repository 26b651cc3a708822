"""
Two-Tower Trainer
Long-window mean-pooled user tower trained against item and cluster embeddings with BCE
"""

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from codebook import (
    AssignmentStore,
    ClusterCodebook,
    assign_batch,
    refit_codebook,
    reseed_dead_clusters,
    update_codebook_ema_batch,
)
from errors import InvalidInputError, MalformedRecordError
from event_log import events_by_user, is_qualifying
from records import format_vector, parse_int, parse_vector, read_records, write_records

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = "#trinity-embeddings v1"


class ItemEmbeddingTable:
    """Learnable item vectors; rows kept in ascending item-id order"""

    def __init__(self, item_ids, matrix):
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.item_ids.size:
            raise InvalidInputError("embedding matrix must have one row per item")
        if np.unique(self.item_ids).size != self.item_ids.size:
            raise InvalidInputError("item ids must be unique")
        if not np.isfinite(self.matrix).all():
            raise InvalidInputError("embeddings must be finite")
        self._row = {int(item): row for row, item in enumerate(self.item_ids)}

    @classmethod
    def random(cls, item_ids, dim, rng):
        item_ids = np.sort(np.asarray(list(item_ids), dtype=np.int64))
        return cls(item_ids, rng.normal(0.0, 1.0 / np.sqrt(dim), size=(item_ids.size, dim)))

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __len__(self):
        return self.item_ids.size

    def __contains__(self, item_id):
        return item_id in self._row

    def row(self, item_id):
        return self._row[item_id]

    def rows(self, item_ids):
        return np.fromiter((self._row[i] for i in item_ids), dtype=np.int64, count=len(item_ids))

    def vector(self, item_id):
        return self.matrix[self._row[item_id]]

    def copy(self):
        return ItemEmbeddingTable(self.item_ids.copy(), self.matrix.copy())


@dataclass(frozen=True)
class TrainingSample:
    user_id: int
    target_item_id: int
    behavior_item_ids: tuple
    label: int
    weight: float = 1.0


@dataclass
class EpochMetrics:
    epoch: int
    samples: int
    batch_losses: list = field(default_factory=list)
    reseeded_clusters: int = 0

    @property
    def mean_loss(self):
        return float(np.mean(self.batch_losses)) if self.batch_losses else 0.0


def label_for(event):
    return int(is_qualifying(event))


def pool_user_representation(behavior_embeddings):
    """b = sum(b_i) / N_b"""
    vectors = np.asarray(behavior_embeddings, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise InvalidInputError("cannot pool an empty behavior list")
    return vectors.mean(axis=0)


def _check_bce_inputs(b, targets, y):
    b = np.asarray(b, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or b.ndim != 1 or targets.shape[1] != b.shape[0]:
        raise InvalidInputError(f"dimension mismatch: b {b.shape}, targets {targets.shape}")
    if not (np.isfinite(b).all() and np.isfinite(targets).all()):
        raise InvalidInputError("bce_loss inputs must be finite")
    if y not in (0, 1):
        raise InvalidInputError(f"label must be 0 or 1, got {y}")
    return b, targets


def bce_loss(b, targets, y):
    """
    Sum of binary cross entropies over the (x, primary centroid, secondary centroid)
    pairs, each scored by the inner product with the pooled user vector b.
    """
    b, targets = _check_bce_inputs(b, targets, y)
    z = targets @ b
    return float(-np.sum(y * log_expit(z) + (1 - y) * log_expit(-z)))


def bce_loss_and_grad(b, targets, y):
    """Returns (loss, dL/db, dL/dA with one row per target)"""
    b, targets = _check_bce_inputs(b, targets, y)
    z = targets @ b
    loss = float(-np.sum(y * log_expit(z) + (1 - y) * log_expit(-z)))
    dz = expit(z) - y
    return loss, dz @ targets, dz[:, None] * b[None, :]


def make_training_samples(events, config, rng):
    """
    One sample per event: the target is the event's item, the behaviors a uniform
    draw of up to max_behaviors items from the qualifying history before it.
    """
    samples = []
    for user_id, user_events in sorted(events_by_user(events).items()):
        history = deque(maxlen=config.window)
        for event in user_events:
            if history:
                pool = np.fromiter(history, dtype=np.int64, count=len(history))
                if pool.size > config.max_behaviors:
                    pool = pool[np.sort(rng.choice(pool.size, config.max_behaviors, replace=False))]
                samples.append(
                    TrainingSample(
                        user_id=user_id,
                        target_item_id=event.item_id,
                        behavior_item_ids=tuple(int(i) for i in pool),
                        label=label_for(event),
                    )
                )
            if is_qualifying(event):
                history.append(event.item_id)
    return samples


class TwoTowerTrainer:
    """
    Single-writer SGD over an item table plus EMA codebook updates. Cluster terms
    push their gradient straight through to the item they were assigned from.
    """

    def __init__(self, table, codebook, config, use_cluster_terms=True, epochs_done=0):
        self.table = table
        self.codebook = codebook
        self.config = config
        self.use_cluster_terms = use_cluster_terms
        self.epochs_done = epochs_done
        self.loss_curve = []
        self.store = None

    @classmethod
    def fresh(cls, item_ids, config, use_cluster_terms=True):
        rng = np.random.default_rng([config.seed, 0xC0DE])
        table = ItemEmbeddingTable.random(item_ids, config.embedding_dim, rng)
        cb = config.codebook
        codebook = ClusterCodebook.from_embeddings(
            table.matrix, cb.n_primary, cb.n_secondary, rng, ema_decay=cb.ema_decay
        )
        return cls(table, codebook, config, use_cluster_terms)

    def _epoch_rng(self, epoch):
        return np.random.default_rng([self.config.seed, epoch])

    def _expand(self, batch, rng):
        """Rows: every sample plus its random negatives; returns index arrays"""
        owner, targets, labels, weights = [], [], [], []
        n_items = len(self.table)
        for s, sample in enumerate(batch):
            owner.append(s)
            targets.append(self.table.row(sample.target_item_id))
            labels.append(sample.label)
            weights.append(sample.weight)
            if sample.label == 1 and self.config.negatives_per_positive:
                for row in rng.integers(n_items, size=self.config.negatives_per_positive):
                    owner.append(s)
                    targets.append(int(row))
                    labels.append(0)
                    weights.append(sample.weight)
        return (
            np.asarray(owner, dtype=np.int64),
            np.asarray(targets, dtype=np.int64),
            np.asarray(labels, dtype=np.float64),
            np.asarray(weights, dtype=np.float64),
        )

    def batch_loss(self, batch, rng):
        """Mean weighted loss of a batch under the current parameters (no update)"""
        return self._forward(batch, rng)[0]

    def _forward(self, batch, rng):
        E = self.table.matrix
        batch = [s for s in batch if s.behavior_item_ids]
        if not batch:
            return 0.0, None

        behavior_rows = [self.table.rows(s.behavior_item_ids) for s in batch]
        users = np.stack([E[rows].mean(axis=0) for rows in behavior_rows])
        owner, targets, labels, weights = self._expand(batch, rng)

        U = users[owner]
        X = E[targets]
        primary, secondary = assign_batch(X, self.codebook)
        heads = [X]
        if self.use_cluster_terms:
            heads += [self.codebook.primary_centroids[primary], self.codebook.secondary_centroids[secondary]]

        n_rows = owner.size
        loss = 0.0
        grad_user = np.zeros_like(U)
        grad_item = np.zeros_like(X)
        for A in heads:
            z = np.einsum("ij,ij->i", U, A)
            loss += float(np.sum(weights * -(labels * log_expit(z) + (1 - labels) * log_expit(-z))))
            # gradient of the summed loss: learning_rate is a per-interaction step
            dz = weights * (expit(z) - labels)
            grad_user += dz[:, None] * A
            # straight-through: cluster heads hand their gradient to the item itself
            grad_item += dz[:, None] * U

        state = (batch, behavior_rows, owner, targets, grad_user, grad_item, X, primary, secondary)
        return loss / n_rows, state

    def train_step(self, batch, rng, update_codebook=True):
        """One SGD step; returns (loss, primary ids, secondary ids) of the batch targets"""
        loss, state = self._forward(batch, rng)
        if state is None:
            return loss, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        batch, behavior_rows, owner, targets, grad_user, grad_item, X, primary, secondary = state

        lr = self.config.learning_rate
        if lr > 0:
            grad = np.zeros_like(self.table.matrix)
            np.add.at(grad, targets, grad_item)
            per_sample = np.zeros((len(batch), grad_user.shape[1]))
            np.add.at(per_sample, owner, grad_user)
            for s, rows in enumerate(behavior_rows):
                np.add.at(grad, rows, per_sample[s] / rows.size)
            self.table.matrix -= lr * grad

        if update_codebook:
            self.codebook = update_codebook_ema_batch(self.codebook, X, primary, secondary)
        return loss, primary, secondary

    def train_epoch(self, samples):
        samples = list(samples)
        if not samples:
            raise InvalidInputError("training stream is empty")
        epoch = self.epochs_done
        rng = self._epoch_rng(epoch)
        metrics = EpochMetrics(epoch=epoch, samples=len(samples))
        primary_usage = np.zeros(self.codebook.n_primary, dtype=np.int64)
        secondary_usage = np.zeros(self.codebook.n_secondary, dtype=np.int64)

        order = rng.permutation(len(samples))
        size = self.config.batch_size
        for start in range(0, len(samples), size):
            batch = [samples[i] for i in order[start:start + size]]
            loss, primary, secondary = self.train_step(batch, rng)
            primary_usage += np.bincount(primary, minlength=primary_usage.size)
            secondary_usage += np.bincount(secondary, minlength=secondary_usage.size)
            metrics.batch_losses.append(loss)

        cb = self.config.codebook
        if epoch < cb.kmeans_init_epochs:
            self.codebook = refit_codebook(self.codebook, self.table.matrix, cb.kmeans_iters, rng, cb.kmeans_restarts)
            # usage now means membership under the re-fit centroids
            primary_usage, secondary_usage = self.codebook.primary_counts, self.codebook.secondary_counts
        if cb.reseed_dead:
            self.codebook, metrics.reseeded_clusters = reseed_dead_clusters(
                self.codebook, primary_usage, secondary_usage, self.table.matrix, rng
            )

        self.store = self.assignment_store()
        self.loss_curve.extend(metrics.batch_losses)
        self.epochs_done += 1
        logger.info(
            f"🧠 Epoch {epoch}: {len(samples)} samples, mean loss {metrics.mean_loss:.4f}, "
            f"{metrics.reseeded_clusters} clusters re-seeded"
        )
        return metrics

    def fit(self, samples):
        samples = list(samples)
        history = [self.train_epoch(samples) for _ in range(self.config.epochs)]
        return history

    def assignment_store(self):
        primary, secondary = assign_batch(self.table.matrix, self.codebook)
        return AssignmentStore.from_arrays(
            self.table.item_ids, primary, secondary, self.codebook.n_primary, self.codebook.n_secondary
        )


def train_epoch(samples, table, codebook, config, epoch=0, use_cluster_terms=True):
    """Functional wrapper: returns a new (table, codebook, metrics) and leaves the inputs untouched"""
    trainer = TwoTowerTrainer(table.copy(), codebook, config, use_cluster_terms, epochs_done=epoch)
    metrics = trainer.train_epoch(samples)
    return trainer.table, trainer.codebook, metrics


class TwoTowerScorer:
    """Scores items for a user with the pooled-behavior tower of a trained table"""

    def __init__(self, table):
        self.table = table

    def user_vector(self, item_ids):
        known = [i for i in item_ids if i in self.table]
        if not known:
            return None
        return pool_user_representation(self.table.matrix[self.table.rows(known)])

    def score(self, user_vec, item_ids):
        return self.table.matrix[self.table.rows(item_ids)] @ user_vec


def save_embeddings(table, path):
    rows = ((str(int(item)), format_vector(vector)) for item, vector in zip(table.item_ids, table.matrix))
    write_records(path, f"{EMBEDDING_MAGIC} d={table.dim}", rows)
    logger.info(f"💾 Saved {len(table)} embeddings (d={table.dim}) to {path}")


def load_embeddings(path):
    params, records = read_records(path, EMBEDDING_MAGIC, 2)
    try:
        dim = int(params["d"])
    except (KeyError, ValueError):
        raise MalformedRecordError(path, 1, "header needs d=<dim>") from None
    item_ids, vectors, seen = [], [], set()
    for number, (item_text, vector_text) in records:
        item = parse_int(path, number, item_text, "item_id")
        if item in seen:
            raise MalformedRecordError(path, number, f"duplicate item_id {item}")
        seen.add(item)
        item_ids.append(item)
        vectors.append(parse_vector(path, number, vector_text, dim))
    order = np.argsort(item_ids, kind="stable")
    matrix = np.asarray(vectors, dtype=np.float64).reshape(-1, dim)[order]
    table = ItemEmbeddingTable(np.asarray(item_ids, dtype=np.int64)[order], matrix)
    logger.info(f"📦 Loaded {len(table)} embeddings from {path}")
    return table
