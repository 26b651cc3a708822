"""
Trinity-LT - Long-tail interest
Streaming occurrence-interval sketch over secondary clusters, long-tail set
construction with juxtapose filtering, and a power-law cluster sampler
"""

import logging

import numpy as np
from scipy.special import softmax

from errors import InvalidInputError, MalformedRecordError, StreamOrderError
from records import parse_float, parse_int, read_records, write_records

logger = logging.getLogger(__name__)

SKETCH_MAGIC = "#trinity-sketch v1"

_GOLDEN64 = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


class IntervalSketch:
    """
    A[bucket]: last occurrence (event index); B[bucket]: EMA of the gap between
    occurrences. The first occurrence only sets A; B starts moving on the second.
    """

    def __init__(self, n_buckets, alpha_ema=0.1, hash_mode="multiplicative"):
        if n_buckets < 1:
            raise InvalidInputError("sketch needs at least one bucket")
        if not 0.0 < alpha_ema <= 1.0:
            raise InvalidInputError(f"alpha_ema must be in (0, 1], got {alpha_ema}")
        if hash_mode not in ("multiplicative", "identity"):
            raise InvalidInputError(f"unknown hash mode '{hash_mode}'")
        self.n_buckets = n_buckets
        self.alpha_ema = alpha_ema
        self.hash_mode = hash_mode
        self.A = np.zeros(n_buckets, dtype=np.int64)
        self.B = np.zeros(n_buckets, dtype=np.float64)
        self.occurrences = np.zeros(n_buckets, dtype=np.int64)
        self._owners = {}

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.n_buckets, cfg.alpha_ema, cfg.hash_mode)

    def bucket(self, cluster_id):
        if self.hash_mode == "identity":
            if not 0 <= cluster_id < self.n_buckets:
                raise InvalidInputError(f"identity hash needs cluster id < {self.n_buckets}, got {cluster_id}")
            return int(cluster_id)
        return ((int(cluster_id) * _GOLDEN64) & _MASK64) % self.n_buckets

    def update(self, cluster_id, t):
        b = self.bucket(cluster_id)
        self._owners.setdefault(b, set()).add(int(cluster_id))
        if self.occurrences[b]:
            if t < self.A[b]:
                raise StreamOrderError(f"event index {t} precedes last occurrence {self.A[b]} of bucket {b}")
            self.B[b] = (1.0 - self.alpha_ema) * self.B[b] + self.alpha_ema * (t - self.A[b])
        self.A[b] = t
        self.occurrences[b] += 1
        return self

    def interval(self, cluster_id):
        return float(self.B[self.bucket(cluster_id)])

    def occurrence_count(self, cluster_id):
        return int(self.occurrences[self.bucket(cluster_id)])

    def collision_rate(self):
        """Fraction of observed clusters sharing their bucket with another cluster"""
        clusters = sum(len(owners) for owners in self._owners.values())
        if clusters == 0:
            return 0.0
        shared = sum(len(owners) for owners in self._owners.values() if len(owners) > 1)
        return shared / clusters

    def snapshot(self):
        copy = IntervalSketch(self.n_buckets, self.alpha_ema, self.hash_mode)
        copy.A = self.A.copy()
        copy.B = self.B.copy()
        copy.occurrences = self.occurrences.copy()
        copy._owners = {b: set(owners) for b, owners in self._owners.items()}
        return copy


def sketch_update(sketch, cluster_id, t):
    return sketch.update(cluster_id, t)


def sketch_from_stream(events, store, cfg):
    """Replay a stream in event order, feeding each event's secondary cluster"""
    sketch = IntervalSketch.from_config(cfg)
    skipped = 0
    for event in sorted(events, key=lambda e: e.event_index):
        clusters = store.get(event.item_id)
        if clusters is None:
            skipped += 1
            continue
        sketch.update(clusters[1], event.event_index)
    if skipped:
        logger.warning(f"⚠️ {skipped} stream events had no cluster assignment")
    logger.info(f"📈 Sketch built: collision rate {sketch.collision_rate():.4f}")
    return sketch


def longtail_set(sketch, items_per_cluster, cfg):
    """Clusters with >= T_i items and a measured interval, top N_C by interval"""
    ranked = [
        cid
        for cid, n_items in items_per_cluster.items()
        if n_items >= cfg.t_i and sketch.occurrence_count(cid) >= 2
    ]
    ranked.sort(key=lambda cid: (-sketch.interval(cid), cid))
    return ranked[: cfg.n_c]


def draw_probabilities(weights_h, cfg):
    """Pr(c_k) = (beta + h_k)^alpha / sum_q (beta + h_q)^alpha; uniform for the ablation sampler"""
    h = np.asarray(weights_h, dtype=np.float64)
    if cfg.sampler == "uniform":
        return np.full(h.size, 1.0 / h.size)
    # log space: large alpha overflows the plain power
    return softmax(cfg.alpha_smp * np.log(cfg.beta_smp + h))


def sample_clusters(candidates, cfg, rng=None):
    """Draw up to N_LT ids without replacement, renormalising after each draw"""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if not candidates:
        return []
    ids = [int(c) for c, _ in candidates]
    h = np.asarray([float(v) for _, v in candidates])
    if (h < 0).any():
        raise InvalidInputError("cluster responses must be non-negative")
    if len(ids) <= cfg.n_lt:
        return ids

    remaining = list(range(len(ids)))
    picked = []
    for _ in range(cfg.n_lt):
        p = draw_probabilities(h[remaining], cfg)
        pos = int(rng.choice(len(remaining), p=p))
        picked.append(ids[remaining.pop(pos)])
    return picked


def select_longtail(h2, longtail_clusters, exclude, cfg, rng=None):
    """Long-tail clusters the user responded to at least T_l times, minus Trinity-M's picks"""
    h2 = np.asarray(h2)
    excluded = set(exclude)
    candidates = [
        (cid, int(h2[cid]))
        for cid in sorted(set(longtail_clusters))
        if 0 <= cid < h2.size and h2[cid] >= cfg.t_l and cid not in excluded
    ]
    return sample_clusters(candidates, cfg, rng)


def save_sketch(sketch, path):
    header = f"{SKETCH_MAGIC} buckets={sketch.n_buckets} alpha={sketch.alpha_ema!r} hash={sketch.hash_mode}"
    rows = (
        (str(b), str(int(sketch.A[b])), repr(float(sketch.B[b])), str(int(sketch.occurrences[b])))
        for b in np.flatnonzero(sketch.occurrences)
    )
    write_records(path, header, rows)
    logger.info(f"💾 Saved sketch snapshot to {path}")


def load_sketch(path):
    params, records = read_records(path, SKETCH_MAGIC, (3, 4))
    try:
        sketch = IntervalSketch(int(params["buckets"]), float(params["alpha"]), params.get("hash", "multiplicative"))
    except (KeyError, ValueError, InvalidInputError):
        raise MalformedRecordError(path, 1, "header needs buckets=, alpha= and a valid hash=") from None
    for number, fields in records:
        b = parse_int(path, number, fields[0], "bucket")
        if not 0 <= b < sketch.n_buckets:
            raise MalformedRecordError(path, number, f"bucket {b} out of range")
        sketch.A[b] = parse_int(path, number, fields[1], "A")
        sketch.B[b] = parse_float(path, number, fields[2], "B")
        if sketch.B[b] < 0:
            raise MalformedRecordError(path, number, "B must be non-negative")
        sketch.occurrences[b] = parse_int(path, number, fields[3], "occurrences") if len(fields) == 4 else 2
    return sketch
