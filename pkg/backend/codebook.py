"""
Cluster Codebook - Hierarchical VQ codebook
Nearest-centroid assignment, EMA centroid updates and the item -> cluster store
"""

import logging
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from errors import InvalidInputError, MalformedRecordError
from records import format_vector, parse_float, parse_int, parse_vector, read_records, write_records

logger = logging.getLogger(__name__)

ASSIGNMENT_MAGIC = "#trinity-assignments v1"
CODEBOOK_MAGIC = "#trinity-codebook v1"

# rows per chunk when materialising (rows, clusters, d) differences
_DISTANCE_BLOCK = 1 << 21


@dataclass(frozen=True, eq=False)
class ClusterCodebook:
    """
    Two levels of centroids. Instances are treated as immutable snapshots:
    every update returns a new codebook, so readers never see a half-applied batch.
    """

    primary_centroids: np.ndarray
    secondary_centroids: np.ndarray
    primary_counts: np.ndarray
    secondary_counts: np.ndarray
    ema_decay: float = 0.99

    def __post_init__(self):
        p, s = self.primary_centroids, self.secondary_centroids
        if p.ndim != 2 or s.ndim != 2 or p.shape[1] != s.shape[1]:
            raise InvalidInputError(f"centroid arrays must be 2-D with equal width, got {p.shape} and {s.shape}")
        if self.primary_counts.shape != (p.shape[0],) or self.secondary_counts.shape != (s.shape[0],):
            raise InvalidInputError("count arrays must have one entry per centroid")
        if not (np.isfinite(p).all() and np.isfinite(s).all()):
            raise InvalidInputError("centroids must be finite")
        if (self.primary_counts < 0).any() or (self.secondary_counts < 0).any():
            raise InvalidInputError("cluster counts must be non-negative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise InvalidInputError(f"ema_decay must be in [0, 1), got {self.ema_decay}")

    @property
    def dim(self):
        return self.primary_centroids.shape[1]

    @property
    def n_primary(self):
        return self.primary_centroids.shape[0]

    @property
    def n_secondary(self):
        return self.secondary_centroids.shape[0]

    @classmethod
    def random(cls, n_primary, n_secondary, dim, rng, ema_decay=0.99):
        scale = 1.0 / np.sqrt(dim)
        return cls(
            primary_centroids=rng.normal(0.0, scale, size=(n_primary, dim)),
            secondary_centroids=rng.normal(0.0, scale, size=(n_secondary, dim)),
            primary_counts=np.zeros(n_primary),
            secondary_counts=np.zeros(n_secondary),
            ema_decay=ema_decay,
        )

    @classmethod
    def from_embeddings(cls, embeddings, n_primary, n_secondary, rng, ema_decay=0.99):
        """Seed both levels with k-means++ picks from the item embeddings"""
        embeddings = np.asarray(embeddings, dtype=np.float64)
        return cls(
            primary_centroids=kmeans_plus_plus(embeddings, n_primary, rng),
            secondary_centroids=kmeans_plus_plus(embeddings, n_secondary, rng),
            primary_counts=np.zeros(n_primary),
            secondary_counts=np.zeros(n_secondary),
            ema_decay=ema_decay,
        )


def _nearest(vectors, centroids):
    """Index of the nearest centroid per row (squared Euclidean, lowest index on ties)"""
    n, m = vectors.shape[0], centroids.shape[0]
    block = max(1, _DISTANCE_BLOCK // max(1, m * centroids.shape[1]))
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, block):
        chunk = vectors[start:start + block]
        diff = chunk[:, None, :] - centroids[None, :, :]
        out[start:start + block] = np.argmin(np.sum(diff * diff, axis=2), axis=1)
    return out


def assign_batch(vectors, codebook):
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != codebook.dim:
        raise InvalidInputError(f"expected (n, {codebook.dim}) embeddings, got shape {vectors.shape}")
    if not np.isfinite(vectors).all():
        raise InvalidInputError("embeddings must be finite")
    return _nearest(vectors, codebook.primary_centroids), _nearest(vectors, codebook.secondary_centroids)


def assign_item(embedding, codebook):
    """Top-1 nearest primary and secondary cluster; the two levels are searched independently"""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape != (codebook.dim,):
        raise InvalidInputError(f"embedding dimension {embedding.shape} does not match codebook d={codebook.dim}")
    primary, secondary = assign_batch(embedding[None, :], codebook)
    return int(primary[0]), int(secondary[0])


def _ema_level(centroids, counts, vectors, ids, decay):
    touched, inverse, members = np.unique(ids, return_inverse=True, return_counts=True)
    sums = np.zeros((touched.size, centroids.shape[1]))
    np.add.at(sums, inverse, vectors)
    means = sums / members[:, None]
    centroids = centroids.copy()
    counts = counts.copy()
    centroids[touched] = decay * centroids[touched] + (1.0 - decay) * means
    counts[touched] = decay * counts[touched] + (1.0 - decay) * members
    return centroids, counts


def update_codebook_ema_batch(codebook, vectors, primary_ids, secondary_ids):
    """Vectorised EMA step; clusters with no new members keep their exact bits"""
    vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, codebook.dim)
    primary_ids = np.asarray(primary_ids, dtype=np.int64)
    secondary_ids = np.asarray(secondary_ids, dtype=np.int64)
    if vectors.shape[0] == 0:
        return codebook
    if primary_ids.min() < 0 or primary_ids.max() >= codebook.n_primary:
        raise InvalidInputError(f"primary cluster id out of range [0, {codebook.n_primary})")
    if secondary_ids.min() < 0 or secondary_ids.max() >= codebook.n_secondary:
        raise InvalidInputError(f"secondary cluster id out of range [0, {codebook.n_secondary})")

    decay = codebook.ema_decay
    primary, primary_counts = _ema_level(
        codebook.primary_centroids, codebook.primary_counts, vectors, primary_ids, decay
    )
    secondary, secondary_counts = _ema_level(
        codebook.secondary_centroids, codebook.secondary_counts, vectors, secondary_ids, decay
    )
    return replace(
        codebook,
        primary_centroids=primary,
        secondary_centroids=secondary,
        primary_counts=primary_counts,
        secondary_counts=secondary_counts,
    )


def update_codebook_ema(codebook, assignments):
    """assignments: list of (embedding, primary_id, secondary_id)"""
    if not assignments:
        return codebook
    vectors = np.array([a[0] for a in assignments], dtype=np.float64)
    primary_ids = [a[1] for a in assignments]
    secondary_ids = [a[2] for a in assignments]
    return update_codebook_ema_batch(codebook, vectors, primary_ids, secondary_ids)


def kmeans_plus_plus(points, k, rng):
    """D^2-weighted seeding; falls back to uniform picks once every point is covered"""
    n = points.shape[0]
    if n == 0:
        raise InvalidInputError("cannot seed centroids from an empty embedding set")
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        centers[i] = points[pick]
        closest = np.minimum(closest, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def _lloyd(points, centers, iters):
    for _ in range(iters):
        labels = _nearest(points, centers)
        sizes = np.bincount(labels, minlength=centers.shape[0])
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        filled = sizes > 0
        updated = centers.copy()
        updated[filled] = sums[filled] / sizes[filled, None]
        if np.array_equal(updated, centers):
            break
        centers = updated
    labels = _nearest(points, centers)
    inertia = float(np.sum((points - centers[labels]) ** 2))
    return centers, np.bincount(labels, minlength=centers.shape[0]).astype(np.float64), inertia


def kmeans(points, k, iters, rng, restarts=1):
    """Best of `restarts` k-means++ seeded Lloyd runs by within-cluster sum of squares"""
    best = None
    for _ in range(max(1, restarts)):
        fit = _lloyd(points, kmeans_plus_plus(points, k, rng), iters)
        if best is None or fit[2] < best[2]:
            best = fit
    return best[0], best[1]


def refit_codebook(codebook, embeddings, iters, rng, restarts=1):
    """Re-seed both levels with k-means++ and polish with Lloyd iterations"""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    primary, primary_counts = kmeans(embeddings, codebook.n_primary, iters, rng, restarts)
    secondary, secondary_counts = kmeans(embeddings, codebook.n_secondary, iters, rng, restarts)
    logger.info(f"🔁 Codebook re-fit on {embeddings.shape[0]} items ({iters} Lloyd iterations, best of {restarts})")
    return replace(
        codebook,
        primary_centroids=primary,
        secondary_centroids=secondary,
        primary_counts=primary_counts,
        secondary_counts=secondary_counts,
    )


def reseed_dead_clusters(codebook, primary_usage, secondary_usage, embeddings, rng):
    """
    Clusters that received no assignment during the epoch jump to a random item embedding.
    Returns (codebook, number of re-seeded clusters).
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    dead_primary = np.flatnonzero(np.asarray(primary_usage) == 0)
    dead_secondary = np.flatnonzero(np.asarray(secondary_usage) == 0)
    if embeddings.shape[0] == 0 or (dead_primary.size == 0 and dead_secondary.size == 0):
        return codebook, 0

    primary = codebook.primary_centroids.copy()
    secondary = codebook.secondary_centroids.copy()
    primary_counts = codebook.primary_counts.copy()
    secondary_counts = codebook.secondary_counts.copy()
    primary[dead_primary] = embeddings[rng.integers(embeddings.shape[0], size=dead_primary.size)]
    secondary[dead_secondary] = embeddings[rng.integers(embeddings.shape[0], size=dead_secondary.size)]
    primary_counts[dead_primary] = 0.0
    secondary_counts[dead_secondary] = 0.0

    reseeded = int(dead_primary.size + dead_secondary.size)
    logger.debug(f"♻️ Re-seeded {dead_primary.size} primary / {dead_secondary.size} secondary dead clusters")
    return (
        replace(
            codebook,
            primary_centroids=primary,
            secondary_centroids=secondary,
            primary_counts=primary_counts,
            secondary_counts=secondary_counts,
        ),
        reseeded,
    )


class AssignmentStore:
    """Exclusive item -> (primary, secondary) map, the key-value dump read at serving time"""

    def __init__(self, n_primary=None, n_secondary=None):
        self.n_primary = n_primary
        self.n_secondary = n_secondary
        self._entries = {}
        self._members = None

    @classmethod
    def from_arrays(cls, item_ids, primary_ids, secondary_ids, n_primary=None, n_secondary=None):
        store = cls(n_primary, n_secondary)
        for item, p, s in zip(item_ids, primary_ids, secondary_ids):
            store.set(int(item), int(p), int(s))
        return store

    def _check(self, primary, secondary):
        if primary < 0 or (self.n_primary is not None and primary >= self.n_primary):
            raise InvalidInputError(f"primary cluster id {primary} out of range")
        if secondary < 0 or (self.n_secondary is not None and secondary >= self.n_secondary):
            raise InvalidInputError(f"secondary cluster id {secondary} out of range")

    def set(self, item_id, primary, secondary):
        self._check(primary, secondary)
        self._entries[int(item_id)] = (int(primary), int(secondary))
        self._members = None

    def get(self, item_id, default=None):
        return self._entries.get(item_id, default)

    def __getitem__(self, item_id):
        return self._entries[item_id]

    def __contains__(self, item_id):
        return item_id in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __eq__(self, other):
        if not isinstance(other, AssignmentStore):
            return NotImplemented
        return self._entries == other._entries

    def items(self):
        return self._entries.items()

    @property
    def shape(self):
        """(J, K): declared sizes, or one past the largest id in use"""
        used = list(self._entries.values())
        n_primary = self.n_primary if self.n_primary is not None else 1 + max((p for p, _ in used), default=-1)
        n_secondary = self.n_secondary if self.n_secondary is not None else 1 + max((s for _, s in used), default=-1)
        return n_primary, n_secondary

    def items_per_secondary(self):
        return Counter(s for _, s in self._entries.values())

    def members_of_secondary(self, secondary):
        """Items assigned to a secondary cluster, ascending id"""
        if self._members is None:
            members = {}
            for item in sorted(self._entries):
                members.setdefault(self._entries[item][1], []).append(item)
            self._members = members
        return self._members.get(secondary, [])


def persist_assignments(store, path):
    rows = ((str(item), str(p), str(s)) for item, (p, s) in sorted(store.items()))
    write_records(path, ASSIGNMENT_MAGIC, rows)
    logger.info(f"💾 Saved {len(store)} assignments to {path}")


def load_assignments(path, n_primary=None, n_secondary=None):
    _, records = read_records(path, ASSIGNMENT_MAGIC, 3)
    store = AssignmentStore(n_primary, n_secondary)
    for number, (item_text, p_text, s_text) in records:
        item = parse_int(path, number, item_text, "item_id")
        if item in store:
            raise MalformedRecordError(path, number, f"duplicate item_id {item}")
        try:
            store.set(
                item,
                parse_int(path, number, p_text, "primary_id"),
                parse_int(path, number, s_text, "secondary_id"),
            )
        except InvalidInputError as e:
            raise MalformedRecordError(path, number, str(e)) from None
    logger.info(f"📦 Loaded {len(store)} assignments from {path}")
    return store


def save_codebook(codebook, path):
    header = (
        f"{CODEBOOK_MAGIC} d={codebook.dim} J={codebook.n_primary} "
        f"K={codebook.n_secondary} decay={codebook.ema_decay!r}"
    )
    rows = []
    for level, centroids, counts in (
        ("primary", codebook.primary_centroids, codebook.primary_counts),
        ("secondary", codebook.secondary_centroids, codebook.secondary_counts),
    ):
        for cluster, (vector, count) in enumerate(zip(centroids, counts)):
            rows.append((level, str(cluster), repr(float(count)), format_vector(vector)))
    write_records(path, header, rows)
    logger.info(f"💾 Saved codebook (J={codebook.n_primary}, K={codebook.n_secondary}) to {path}")


def load_codebook(path):
    params, records = read_records(path, CODEBOOK_MAGIC, 4)
    try:
        dim, n_primary, n_secondary = int(params["d"]), int(params["J"]), int(params["K"])
        decay = float(params["decay"])
    except (KeyError, ValueError):
        raise MalformedRecordError(path, 1, "header needs d=, J=, K= and decay=") from None

    sizes = {"primary": n_primary, "secondary": n_secondary}
    centroids = {level: np.zeros((size, dim)) for level, size in sizes.items()}
    counts = {level: np.zeros(size) for level, size in sizes.items()}
    seen = set()
    for number, (level, cluster_text, count_text, vector_text) in records:
        if level not in sizes:
            raise MalformedRecordError(path, number, f"unknown level '{level}'")
        cluster = parse_int(path, number, cluster_text, "cluster")
        if not 0 <= cluster < sizes[level] or (level, cluster) in seen:
            raise MalformedRecordError(path, number, f"bad or repeated {level} cluster {cluster}")
        seen.add((level, cluster))
        counts[level][cluster] = parse_float(path, number, count_text, "count")
        centroids[level][cluster] = parse_vector(path, number, vector_text, dim)
    if len(seen) != n_primary + n_secondary:
        raise MalformedRecordError(path, len(records) + 1, "codebook file is missing clusters")

    return ClusterCodebook(
        primary_centroids=centroids["primary"],
        secondary_centroids=centroids["secondary"],
        primary_counts=counts["primary"],
        secondary_counts=counts["secondary"],
        ema_decay=decay,
    )
