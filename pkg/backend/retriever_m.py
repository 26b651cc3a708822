"""
Trinity-M - Multi-interest cluster selection
Walks the primary -> secondary tree and picks at most N_M secondary clusters
"""

import logging

import numpy as np

from histogram import secondary_totals

logger = logging.getLogger(__name__)


def _by_count(counts):
    """Keys sorted by count descending, ties by ascending id"""
    return sorted(counts, key=lambda cid: (-counts[cid], cid))


def _downsample(selected, n, rng):
    """Uniform pick of n ids without replacement, keeping selection order"""
    keep = np.sort(rng.choice(len(selected), size=n, replace=False))
    return [selected[i] for i in keep]


def _phase1_eligible(children, cfg):
    if cfg.phase1_rule == "all":
        return all(count >= cfg.t_s for count in children.values())
    return any(count >= cfg.t_s for count in children.values())


def strong_primaries(tree, cfg):
    """Primaries with h1 >= T_p, largest first"""
    primary_counts = {j: sum(children.values()) for j, children in tree.items()}
    return [j for j in _by_count(primary_counts) if primary_counts[j] >= cfg.t_p]


def phase1_primaries(tree, cfg):
    return [j for j in strong_primaries(tree, cfg) if tree[j] and _phase1_eligible(tree[j], cfg)]


def phase1_picks(tree, cfg, rng):
    """One uniformly drawn child per Phase-1 primary, as (primary, secondary) pairs"""
    picks = []
    for j in phase1_primaries(tree, cfg):
        children = tree[j]
        candidates = sorted(children)
        if cfg.phase1_rule == "any":
            candidates = [k for k in candidates if children[k] >= cfg.t_s]
        picks.append((j, candidates[int(rng.integers(len(candidates)))]))
    return picks


def select_multi_interest(tree, cfg, rng=None):
    """
    Three phases, deduplicating as it goes:
      1. primaries with h1 >= T_p whose children pass T_s contribute one random child
      2. primaries with h1 >= T_p that added nothing in phase 1 contribute their largest unselected child
      3. global secondaries, largest first, until N_M or the tree runs out
    After phases 1 and 2 an oversized set is downsampled to exactly N_M.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if not tree:
        return []

    selected = []
    chosen = set()
    represented = set()

    for j, pick in phase1_picks(tree, cfg, rng):
        # a child already taken by a larger primary leaves j to phase 2
        if pick not in chosen:
            represented.add(j)
            chosen.add(pick)
            selected.append(pick)

    if len(selected) >= cfg.n_m:
        return _downsample(selected, cfg.n_m, rng)

    for j in strong_primaries(tree, cfg):
        if j in represented:
            continue
        remaining = {k: c for k, c in tree[j].items() if k not in chosen}
        if not remaining:
            continue
        pick = _by_count(remaining)[0]
        represented.add(j)
        chosen.add(pick)
        selected.append(pick)

    if len(selected) >= cfg.n_m:
        return _downsample(selected, cfg.n_m, rng)

    # the loop stops when the tree has no unselected secondary left
    for k in _by_count(secondary_totals(tree)):
        if len(selected) >= cfg.n_m:
            break
        if k not in chosen:
            chosen.add(k)
            selected.append(k)

    return selected
