"""
Simulation Harness
Synthetic world with planted topic interests, feedback stream simulation and
scoring of retrieval outputs against the planted ground truth
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field

from config import WorldConfig
from errors import InvalidInputError, MissingUsersError
from event_log import BehaviorEvent
from records import write_text_atomic

logger = logging.getLogger(__name__)

RETRIEVERS = ("baseline", "multi", "longtail", "longterm")
AGE_BINS = (("0-7", 0.0, 7.0), ("7-15", 7.0, 15.0), ("15-30", 15.0, 30.0), ("30+", 30.0, float("inf")))


class UserProfile(BaseModel):
    user_id: int
    dominant: list[int] = Field(default_factory=list)
    niche: list[int] = Field(default_factory=list)
    dormant: list[int] = Field(default_factory=list)
    dormant_window: tuple[int, int] = (0, 0)  # [start_tick, end_tick)
    weights: dict[int, float] = Field(default_factory=dict)

    @property
    def planted(self):
        return set(self.dominant) | set(self.niche) | set(self.dormant)

    def mixture(self, tick):
        """Topic probabilities at a tick; dormant topics only inside their window"""
        start, end = self.dormant_window
        dormant_on = start <= tick < end
        topics = [t for t in self.weights if dormant_on or t not in self.dormant]
        if not topics:
            topics = list(self.weights)
        w = np.asarray([self.weights[t] for t in topics], dtype=np.float64)
        if w.sum() <= 0:
            w = np.ones(len(topics))
        return topics, w / w.sum()


@dataclass
class World:
    config: object
    item_topics: np.ndarray
    topic_sizes: np.ndarray
    users: list

    @property
    def item_ids(self):
        return np.arange(self.item_topics.size, dtype=np.int64)

    @property
    def longtail_topics(self):
        """Least popular topics by planted size (bottom longtail_topic_fraction)"""
        n = self.topic_sizes.size
        n_tail = max(1, int(round(n * self.config.longtail_topic_fraction)))
        order = np.lexsort((np.arange(n), -self.topic_sizes))
        return {int(t) for t in order[n - n_tail:]}

    def topic_items(self, topic):
        return np.flatnonzero(self.item_topics == topic)

    def user(self, user_id):
        return self.users[user_id]

    def save(self, path):
        payload = {
            "config": self.config.model_dump(mode="json"),
            "topic_sizes": self.topic_sizes.tolist(),
            "item_topics": self.item_topics.tolist(),
            "users": [u.model_dump(mode="json") for u in self.users],
        }
        write_text_atomic(path, json.dumps(payload, sort_keys=True) + "\n")
        logger.info(f"💾 Saved world ({self.item_topics.size} items, {len(self.users)} users) to {path}")


def load_world(path):
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    world = World(
        config=WorldConfig.model_validate(payload["config"]),
        item_topics=np.asarray(payload["item_topics"], dtype=np.int64),
        topic_sizes=np.asarray(payload["topic_sizes"], dtype=np.int64),
        users=[UserProfile.model_validate(u) for u in payload["users"]],
    )
    logger.info(f"📦 Loaded world from {path}")
    return world


def zipf_topic_sizes(n_items, n_topics, exponent):
    """One item per topic, the rest split by a Zipf law with largest-remainder rounding"""
    if n_topics < 1 or n_topics > n_items:
        raise InvalidInputError(f"cannot split {n_items} items into {n_topics} topics")
    weights = np.power(np.arange(1, n_topics + 1, dtype=np.float64), -exponent)
    share = (n_items - n_topics) * weights / weights.sum()
    sizes = np.floor(share).astype(np.int64)
    leftover = (n_items - n_topics) - int(sizes.sum())
    if leftover:
        order = np.lexsort((np.arange(n_topics), -(share - sizes)))
        sizes[order[:leftover]] += 1
    return sizes + 1


def generate_world(cfg):
    rng = np.random.default_rng([cfg.seed, 0x3071D])
    sizes = zipf_topic_sizes(cfg.n_items, cfg.n_topics, cfg.zipf_exponent)
    item_topics = rng.permutation(np.repeat(np.arange(cfg.n_topics), sizes))

    popularity = sizes / sizes.sum()
    n_tail = max(1, int(round(cfg.n_topics * cfg.longtail_topic_fraction)))
    tail = set(np.lexsort((np.arange(cfg.n_topics), -sizes))[cfg.n_topics - n_tail:].tolist())
    window = (int(cfg.dormant_start * cfg.horizon), int(cfg.dormant_end * cfg.horizon))

    users = []
    for user_id in range(cfg.n_users):
        taken = set()

        def draw(count, pool, weighted=False):
            pool = [t for t in pool if t not in taken]
            if count == 0 or not pool:
                return []
            if len(pool) < count:
                pool = [t for t in range(cfg.n_topics) if t not in taken]
            p = None
            if weighted:
                p = np.asarray([popularity[t] for t in pool])
                p = p / p.sum()
            picks = rng.choice(pool, size=min(count, len(pool)), replace=False, p=p)
            picks = sorted(int(t) for t in picks)
            taken.update(picks)
            return picks

        dominant = draw(cfg.n_dominant, range(cfg.n_topics), weighted=True)
        niche = draw(cfg.n_niche, sorted(tail))
        dormant = draw(cfg.n_dormant, range(cfg.n_topics))

        weights = {}
        for group, mass in ((dominant, cfg.dominant_mass), (niche, cfg.niche_mass), (dormant, cfg.dormant_mass)):
            for topic in group:
                weights[topic] = mass / len(group)
        total = sum(weights.values()) or 1.0
        weights = {t: w / total for t, w in weights.items()}
        users.append(
            UserProfile(
                user_id=user_id,
                dominant=dominant,
                niche=niche,
                dormant=dormant,
                dormant_window=window,
                weights=weights,
            )
        )

    logger.info(f"🌍 World ready: {cfg.n_items} items, {cfg.n_topics} topics, {cfg.n_users} users")
    return World(config=cfg, item_topics=item_topics, topic_sizes=sizes, users=users)


def _simulate_user(world, profile, rank, horizon, seed_seq):
    cfg = world.config
    rng = np.random.default_rng(seed_seq)
    popularity = world.topic_sizes / world.topic_sizes.sum()
    members = [world.topic_items(t) for t in range(world.topic_sizes.size)]
    events = []
    for tick in range(horizon):
        if rng.random() >= cfg.activity_rate:
            continue
        topics, p = profile.mixture(tick)
        if rng.random() < cfg.explore_rate:
            topic = int(rng.choice(popularity.size, p=popularity))
            matched = topic in topics
        else:
            topic = int(topics[rng.choice(len(topics), p=p)])
            matched = True
        item = int(rng.choice(members[topic]))
        if matched:
            playtime = float(rng.gamma(2.0, 15.0))
            finished = bool(rng.random() < 0.3)
            interacted = bool(rng.random() < 0.1)
        else:
            playtime = float(rng.exponential(3.0))
            finished = bool(rng.random() < 0.02)
            interacted = bool(rng.random() < 0.01)
        events.append(
            BehaviorEvent(
                user_id=profile.user_id,
                item_id=item,
                event_index=tick * len(world.users) + rank,
                playtime_s=round(playtime, 3),
                finished=finished,
                interacted=interacted,
            )
        )
    return events


def simulate_stream(world, horizon=None, max_workers=4):
    """Each user draws from their own mixture with an independent RNG; merged by event index"""
    horizon = world.config.horizon if horizon is None else horizon
    if horizon <= 0:
        return []
    seeds = np.random.SeedSequence([world.config.seed, 0x57AE]).spawn(len(world.users))
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        per_user = list(
            executor.map(
                lambda args: _simulate_user(world, args[1], args[0], horizon, seeds[args[0]]),
                enumerate(world.users),
            )
        )
    events = sorted((e for user_events in per_user for e in user_events), key=lambda e: e.event_index)
    logger.info(f"🎬 Simulated {len(events)} events over {horizon} ticks")
    return events


def event_age_days(world, event_index, now_tick):
    tick = event_index // len(world.users)
    return (now_tick - tick) / world.config.ticks_per_day


class RetrievalOutput(BaseModel):
    user_id: int
    clusters_m: list[int] = Field(default_factory=list)
    clusters_lt: list[int] = Field(default_factory=list)
    items: dict[str, list[int]] = Field(default_factory=dict)  # reranked, per retriever
    seed_ages_days: list[float] = Field(default_factory=list)
    recency_seed_ages_days: list[float] = Field(default_factory=list)


class EvalReport(BaseModel):
    interest_coverage: float
    longtail_share_delta: float
    overlap_matrix: dict[str, dict[str, float]]
    uniqueness: float
    seed_age_histogram: dict[str, float]
    coverage_breakdown: dict[str, float] = Field(default_factory=dict)
    longtail_share: dict[str, float] = Field(default_factory=dict)
    longtail_consumed_coverage: float = 0.0
    median_seed_age_days: dict[str, float] = Field(default_factory=dict)
    users: int = 0

    def to_json(self):
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        write_text_atomic(path, self.to_json())
        logger.info(f"💾 Saved evaluation report to {path}")


def cluster_topics(store, item_topics):
    """Secondary cluster -> majority latent topic of its members (lowest topic on ties)"""
    votes = {}
    for item, (_, secondary) in store.items():
        if 0 <= item < item_topics.size:
            tally = votes.setdefault(secondary, {})
            topic = int(item_topics[item])
            tally[topic] = tally.get(topic, 0) + 1
    return {c: min(tally, key=lambda t: (-tally[t], t)) for c, tally in votes.items()}


def _fraction(numerator, denominator):
    return numerator / denominator if denominator else 0.0


def _jaccard(a, b):
    union = a | b
    return len(a & b) / len(union) if union else None


def _dedupe(items):
    seen = set()
    return [i for i in items if not (i in seen or seen.add(i))]


def evaluate(world, outputs, baseline, store, impression_quota=20):
    """
    outputs: user_id -> RetrievalOutput; baseline: user_id -> baseline item ids.
    Topics of clusters come from a majority vote over member items.
    """
    expected = {u.user_id for u in world.users}
    missing = (expected - set(outputs)) | (expected - set(baseline))
    if missing:
        raise MissingUsersError(missing)

    topic_of_item = world.item_topics
    topic_of_cluster = cluster_topics(store, topic_of_item)
    longtail_topics = world.longtail_topics

    def item_topic_set(items):
        return {int(topic_of_item[i]) for i in items if 0 <= i < topic_of_item.size}

    def cluster_topic_set(clusters):
        return {topic_of_cluster[c] for c in clusters if c in topic_of_cluster}

    coverage = {"trinity": [], "baseline": [], "m_union_baseline": [], "niche_baseline": [], "niche_m_union_baseline": []}
    consumed_tail = []
    m_total = m_unique = 0
    share = {"with_lt": [0, 0], "without_lt": [0, 0]}
    overlap_sums = {(a, b): [0.0, 0] for a in RETRIEVERS for b in RETRIEVERS}
    seed_ages, recency_ages = [], []

    for profile in world.users:
        out = outputs[profile.user_id]
        base_items = list(baseline[profile.user_id])
        planted = profile.planted
        niche = set(profile.niche)

        topics_m = cluster_topic_set(out.clusters_m)
        topics_lt = cluster_topic_set(out.clusters_lt)
        topics_l = item_topic_set(out.items.get("longterm", []))
        topics_base = item_topic_set(base_items)
        trinity = topics_m | topics_lt | topics_l

        coverage["trinity"].append(_fraction(len(planted & trinity), len(planted)))
        coverage["baseline"].append(_fraction(len(planted & topics_base), len(planted)))
        coverage["m_union_baseline"].append(_fraction(len(planted & (topics_m | topics_base)), len(planted)))
        if niche:
            coverage["niche_baseline"].append(_fraction(len(niche & topics_base), len(niche)))
            coverage["niche_m_union_baseline"].append(_fraction(len(niche & (topics_m | topics_base)), len(niche)))
        tail_consumed = planted & longtail_topics
        if tail_consumed:
            consumed_tail.append(_fraction(len(tail_consumed & topics_lt), len(tail_consumed)))

        base_clusters = {store[i][1] for i in base_items if i in store}
        m_total += len(out.clusters_m)
        m_unique += sum(1 for c in out.clusters_m if c not in base_clusters)

        lists = {"baseline": base_items}
        lists.update({name: list(out.items.get(name, [])) for name in RETRIEVERS[1:]})
        for label, names in (("with_lt", RETRIEVERS), ("without_lt", ("baseline", "multi", "longterm"))):
            shown = _dedupe([i for name in names for i in lists[name][:impression_quota]])
            share[label][0] += sum(1 for i in shown if int(topic_of_item[i]) in longtail_topics)
            share[label][1] += len(shown)

        sets = {name: set(items) for name, items in lists.items()}
        for a in RETRIEVERS:
            for b in RETRIEVERS:
                value = _jaccard(sets[a], sets[b])
                if value is not None:
                    overlap_sums[(a, b)][0] += value
                    overlap_sums[(a, b)][1] += 1

        seed_ages.extend(out.seed_ages_days)
        recency_ages.extend(out.recency_seed_ages_days)

    overlap = {
        a: {b: 1.0 if a == b else _fraction(*overlap_sums[(a, b)]) for b in RETRIEVERS}
        for a in RETRIEVERS
    }
    histogram = {
        label: _fraction(sum(1 for age in seed_ages if lo <= age < hi), len(seed_ages)) for label, lo, hi in AGE_BINS
    }
    share_with = _fraction(*share["with_lt"])
    share_without = _fraction(*share["without_lt"])

    return EvalReport(
        interest_coverage=float(np.mean(coverage["trinity"])) if coverage["trinity"] else 0.0,
        longtail_share_delta=share_with - share_without,
        overlap_matrix=overlap,
        uniqueness=_fraction(m_unique, m_total),
        seed_age_histogram=histogram,
        coverage_breakdown={k: float(np.mean(v)) if v else 0.0 for k, v in coverage.items()},
        longtail_share={"with_lt": share_with, "without_lt": share_without},
        longtail_consumed_coverage=float(np.mean(consumed_tail)) if consumed_tail else 0.0,
        median_seed_age_days={
            "trinity_l": float(np.median(seed_ages)) if seed_ages else 0.0,
            "recency": float(np.median(recency_ages)) if recency_ages else 0.0,
        },
        users=len(world.users),
    )
