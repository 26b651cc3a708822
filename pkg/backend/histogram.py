"""
Interest Histograms
Project a behavior sequence through the assignment store into per-cluster counts
"""

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from event_log import is_qualifying

logger = logging.getLogger(__name__)

MAX_SEQUENCE_LENGTH = 2500


class BehaviorSequence:
    """
    A user's long-window sequence of qualifying (item_id, event_index) pairs.
    Oldest events are evicted first once the cap is reached.
    """

    def __init__(self, user_id, cap=MAX_SEQUENCE_LENGTH):
        self.user_id = user_id
        self.cap = cap
        self._events = deque(maxlen=cap)

    @classmethod
    def from_events(cls, user_id, events, cap=MAX_SEQUENCE_LENGTH):
        seq = cls(user_id, cap)
        for event in sorted(events, key=lambda e: e.event_index):
            if event.user_id == user_id:
                seq.observe(event)
        return seq

    def observe(self, event):
        """Append an event if its feedback qualifies; returns whether it was kept"""
        if not is_qualifying(event):
            return False
        self.append(event.item_id, event.event_index)
        return True

    def append(self, item_id, event_index):
        self._events.append((int(item_id), int(event_index)))

    @property
    def events(self):
        return list(self._events)

    def item_ids(self):
        return [item for item, _ in self._events]

    def __len__(self):
        return len(self._events)

    def __iter__(self):
        return iter(self._events)


@dataclass
class InterestHistogram:
    h1: np.ndarray
    h2: np.ndarray
    tree: dict = field(default_factory=dict)
    skipped: int = 0

    @classmethod
    def empty(cls, n_primary, n_secondary):
        return cls(np.zeros(n_primary, dtype=np.int64), np.zeros(n_secondary, dtype=np.int64))

    @property
    def resolved(self):
        return int(self.h1.sum())

    def add(self, primary, secondary, count=1):
        self.h1[primary] += count
        self.h2[secondary] += count
        children = self.tree.setdefault(primary, {})
        children[secondary] = children.get(secondary, 0) + count

    def __eq__(self, other):
        if not isinstance(other, InterestHistogram):
            return NotImplemented
        return (
            np.array_equal(self.h1, other.h1)
            and np.array_equal(self.h2, other.h2)
            and self.tree == other.tree
            and self.skipped == other.skipped
        )


def build_histogram(seq, store, n_primary=None, n_secondary=None):
    """Count events per primary, per secondary and per (primary, secondary) pair"""
    default_primary, default_secondary = store.shape
    n_primary = n_primary if n_primary is not None else default_primary
    n_secondary = n_secondary if n_secondary is not None else default_secondary
    hist = InterestHistogram.empty(n_primary, n_secondary)
    for item_id, _ in seq:
        clusters = store.get(item_id)
        if clusters is None:
            hist.skipped += 1
            continue
        hist.add(*clusters)
    if hist.skipped:
        logger.debug(f"⚠️ user {getattr(seq, 'user_id', '?')}: {hist.skipped} events without assignment skipped")
    return hist


def sorted_view(counts):
    """(cluster_id, count) pairs, counts descending, ties by ascending id"""
    counts = np.asarray(counts)
    ids = np.arange(counts.size)
    order = np.lexsort((ids, -counts))
    return [(int(i), int(counts[i])) for i in order]


def secondary_totals(tree):
    """Collapse the dual-subscript tree into one count per secondary cluster"""
    totals = {}
    for children in tree.values():
        for secondary, count in children.items():
            totals[secondary] = totals.get(secondary, 0) + count
    return totals
