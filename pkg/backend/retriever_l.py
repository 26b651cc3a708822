"""
Trinity-L - Long-term interest
Pre-rank the behavior sequence, disperse by secondary cluster, sample seeds,
then i2i search with the long-window item embeddings
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class I2IResult:
    candidates: list = field(default_factory=list)  # (item_id, best similarity), best first
    skipped_seeds: int = 0

    @property
    def item_ids(self):
        return [item for item, _ in self.candidates]


def _latest_positions(seq):
    """item_id -> most recent event index in the sequence"""
    latest = {}
    for item, event_index in seq:
        latest[item] = max(event_index, latest.get(item, event_index))
    return latest


def prerank_seeds(seq, scorer):
    """Score every distinct sequence item; best first, newer first on ties"""
    latest = _latest_positions(seq)
    if not latest:
        return []
    user_vec = scorer.user_vector(seq.item_ids())
    items = [i for i in latest if user_vec is not None and i in scorer.table]
    missing = [i for i in latest if i not in items]
    if not items:
        return [(i, 0.0) for i in sorted(missing, key=lambda i: -latest[i])]

    scores = scorer.score(user_vec, items)
    ranked = sorted(zip(items, scores.tolist()), key=lambda pair: (-pair[1], -latest[pair[0]]))
    # unscorable items trail the scored ones, newest first
    ranked += [(i, float("-inf")) for i in sorted(missing, key=lambda i: -latest[i])]
    return ranked


def disperse(ranked, store, cfg):
    """Keep at most T_c items per secondary cluster until N_s items are kept"""
    kept = []
    per_cluster = {}
    for item, _ in ranked:
        clusters = store.get(item)
        if clusters is None:
            continue
        secondary = clusters[1]
        if cfg.t_c is not None and per_cluster.get(secondary, 0) >= cfg.t_c:
            continue
        per_cluster[secondary] = per_cluster.get(secondary, 0) + 1
        kept.append(item)
        if len(kept) >= cfg.n_s:
            break
    return kept


def disperse_and_sample(ranked, store, cfg, rng=None):
    """Uniformly sample N_L seeds from the dispersed pool, keeping rank order"""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    pool = disperse(ranked, store, cfg)
    if len(pool) <= cfg.n_l:
        return pool
    keep = np.sort(rng.choice(len(pool), size=cfg.n_l, replace=False))
    return [pool[i] for i in keep]


def recency_seeds(seq, n_l):
    """Baseline seed rule: the n_l most recent distinct items"""
    latest = _latest_positions(seq)
    return sorted(latest, key=lambda i: -latest[i])[:n_l]


def _top_k(scores, item_ids, k):
    """Top-k by score, ties by ascending item id"""
    if scores.size == 0:
        return []
    k = min(k, scores.size)
    if k < scores.size:
        part = np.argpartition(-scores, k - 1)[:k]
        threshold = scores[part].min()
        part = np.flatnonzero(scores >= threshold)
    else:
        part = np.arange(scores.size)
    order = np.lexsort((item_ids[part], -scores[part]))[:k]
    return [(int(item_ids[part[i]]), float(scores[part[i]])) for i in order]


def i2i_search(seeds, embeddings, corpus, k_nn, exclude=(), max_workers=4):
    """
    Exhaustive inner-product search per seed over the corpus, skipping the seed
    itself and every excluded (already consumed) item. Per-item best score wins.
    """
    corpus_ids = np.asarray(sorted(i for i in set(corpus) if i in embeddings), dtype=np.int64)
    if corpus_ids.size == 0:
        return I2IResult(skipped_seeds=sum(1 for s in seeds if s not in embeddings))
    matrix = embeddings.matrix[embeddings.rows(corpus_ids.tolist())]
    excluded = np.isin(corpus_ids, np.asarray(list(set(exclude)), dtype=np.int64))

    usable = [s for s in seeds if s in embeddings]
    skipped = len(seeds) - len(usable)
    if skipped:
        logger.warning(f"⚠️ {skipped} seeds have no embedding and were skipped")

    def search(seed):
        scores = matrix @ embeddings.vector(seed)
        mask = excluded | (corpus_ids == seed)
        keep = ~mask
        return _top_k(scores[keep], corpus_ids[keep], k_nn)

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        per_seed = list(executor.map(search, usable))

    best = {}
    for hits in per_seed:
        for item, score in hits:
            if item not in best or score > best[item]:
                best[item] = score
    candidates = sorted(best.items(), key=lambda pair: (-pair[1], pair[0]))
    return I2IResult(candidates=candidates, skipped_seeds=skipped)


def retrieve_long_term(seq, scorer, store, embeddings, corpus, cfg, rng=None):
    """prerank -> disperse -> sample seeds -> i2i; returns (seeds, I2IResult)"""
    ranked = prerank_seeds(seq, scorer)
    seeds = disperse_and_sample(ranked, store, cfg, rng)
    result = i2i_search(seeds, embeddings, corpus, cfg.k_nn, exclude=seq.item_ids(), max_workers=cfg.max_workers)
    return seeds, result
