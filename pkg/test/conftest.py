import os
import sys

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "backend"))

from codebook import AssignmentStore  # noqa: E402
from config import PipelineConfig  # noqa: E402
from event_log import BehaviorEvent  # noqa: E402

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "ci"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_event(user_id, item_id, event_index, playtime_s=30.0, finished=False, interacted=False):
    return BehaviorEvent(
        user_id=user_id,
        item_id=item_id,
        event_index=event_index,
        playtime_s=playtime_s,
        finished=finished,
        interacted=interacted,
    )


@pytest.fixture
def small_store():
    """Six items over three secondary clusters"""
    store = AssignmentStore(n_primary=2, n_secondary=3)
    for item, (p, s) in {1: (0, 0), 2: (0, 0), 3: (0, 1), 4: (1, 1), 5: (1, 2), 6: (1, 2)}.items():
        store.set(item, p, s)
    return store


def tiny_pipeline_config(seed=7, **world):
    """Smoke-sized world: 100 items, 10 users"""
    world_values = dict(n_items=100, n_topics=8, n_users=10, horizon=60, ticks_per_day=5, seed=seed)
    world_values.update(world)
    codebook = dict(n_primary=4, n_secondary=8, kmeans_init_epochs=2)
    cfg = PipelineConfig.model_validate(
        {
            "world": world_values,
            "train": {"embedding_dim": 8, "epochs": 2, "batch_size": 64, "seed": seed, "codebook": codebook},
            "prerank": {"embedding_dim": 8, "epochs": 1, "batch_size": 64, "seed": seed + 1, "codebook": codebook},
            "multi": {"t_p": 3, "t_s": 1, "n_m": 4},
            "longtail": {"t_i": 1, "t_l": 1, "n_c": 8, "n_lt": 2, "n_buckets": 64},
            "longterm": {"t_c": 3, "n_s": 20, "n_l": 5, "k_nn": 5, "max_workers": 2},
            "rerank": {"embedding_dim": 8, "epochs": 1, "batch_size": 32, "budget": 50},
            "baseline_k": 10,
            "impression_quota": 5,
        }
    )
    return cfg
