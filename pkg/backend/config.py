"""
Trinity Configuration
Typed settings for every stage, read from key=value files and TRINITY_* env vars
"""

import hashlib
import json
import logging
import os
from typing import Literal, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)

ENV_PREFIX = "TRINITY_"


class _Settings(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class CodebookConfig(_Settings):
    n_primary: int = Field(128, ge=1)
    n_secondary: int = Field(1024, ge=1)
    ema_decay: float = Field(0.99, ge=0.0, lt=1.0)
    reseed_dead: bool = True
    kmeans_init_epochs: int = Field(1, ge=0)
    kmeans_iters: int = Field(10, ge=0)
    kmeans_restarts: int = Field(3, ge=1)


class TrainingConfig(_Settings):
    embedding_dim: int = Field(32, ge=1)
    learning_rate: float = Field(0.05, ge=0.0)
    negatives_per_positive: int = Field(4, ge=0)
    batch_size: int = Field(256, ge=1)
    epochs: int = Field(5, ge=1)
    max_behaviors: int = Field(64, ge=1)
    window: int = Field(2500, ge=1)
    seed: int = 0
    codebook: CodebookConfig = Field(default_factory=CodebookConfig)
    events_path: Optional[str] = None


class TrinityMConfig(_Settings):
    t_p: int = Field(30, ge=1)
    t_s: int = Field(10, ge=1)
    n_m: int = Field(10, ge=1)
    phase1_rule: Literal["all", "any"] = "all"
    seed: int = 0

    @model_validator(mode="after")
    def _thresholds_ordered(self):
        if self.t_p < self.t_s:
            raise ValueError(f"t_p ({self.t_p}) must be >= t_s ({self.t_s})")
        return self


class LongTailConfig(_Settings):
    t_i: int = Field(3, ge=1)
    t_l: int = Field(3, ge=1)
    n_c: int = Field(600, ge=1)
    n_lt: int = Field(20, ge=1)
    alpha_smp: float = Field(0.75, ge=0.0)
    beta_smp: float = Field(0.1, gt=0.0)
    alpha_ema: float = Field(0.1, gt=0.0, le=1.0)
    n_buckets: int = Field(4096, ge=1)
    hash_mode: Literal["multiplicative", "identity"] = "multiplicative"
    sampler: Literal["weighted", "uniform"] = "weighted"
    seed: int = 0


class TrinityLConfig(_Settings):
    t_c: Optional[int] = Field(3, ge=1)  # None = no per-cluster cap
    n_s: int = Field(200, ge=1)
    n_l: int = Field(20, ge=1)
    k_nn: int = Field(50, ge=1)
    max_workers: int = Field(4, ge=1)
    seed: int = 0

    @field_validator("t_c", mode="before")
    @classmethod
    def _unbounded_cap(cls, value):
        if isinstance(value, str) and value.strip().lower() in ("", "inf", "none"):
            return None
        return value

    @model_validator(mode="after")
    def _pool_holds_seeds(self):
        if self.n_l > self.n_s:
            raise ValueError(f"n_l ({self.n_l}) must be <= n_s ({self.n_s})")
        return self


class RerankConfig(_Settings):
    budget: int = Field(1000, ge=1)
    embedding_dim: int = Field(32, ge=1)
    learning_rate: float = Field(0.05, ge=0.0)
    batch_size: int = Field(128, ge=2)
    epochs: int = Field(3, ge=1)
    max_behaviors: int = Field(64, ge=1)
    negative_playtime_s: float = Field(2.0, ge=0.0)
    playtime_clip_s: float = Field(300.0, gt=0.0)
    seed: int = 0


class WorldConfig(_Settings):
    n_items: int = Field(2000, ge=1)
    n_topics: int = Field(32, ge=1)
    n_users: int = Field(100, ge=1)
    zipf_exponent: float = Field(1.2, ge=0.0)
    n_dominant: int = Field(1, ge=0)
    n_niche: int = Field(2, ge=0)
    n_dormant: int = Field(1, ge=0)
    dominant_mass: float = Field(0.6, ge=0.0)
    niche_mass: float = Field(0.3, ge=0.0)
    dormant_mass: float = Field(0.1, ge=0.0)
    dormant_start: float = Field(0.0, ge=0.0, le=1.0)
    dormant_end: float = Field(0.3, ge=0.0, le=1.0)
    explore_rate: float = Field(0.1, ge=0.0, le=1.0)
    activity_rate: float = Field(1.0, gt=0.0, le=1.0)
    horizon: int = Field(300, ge=0)
    ticks_per_day: int = Field(10, ge=1)
    longtail_topic_fraction: float = Field(0.5, gt=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _consistent_sizes(self):
        if self.n_topics > self.n_items:
            raise ValueError(f"n_topics ({self.n_topics}) exceeds n_items ({self.n_items})")
        if self.n_dominant + self.n_niche + self.n_dormant > self.n_topics:
            raise ValueError("per-user topic counts exceed n_topics")
        if self.n_dominant + self.n_niche + self.n_dormant == 0:
            raise ValueError("users need at least one planted topic")
        if self.dormant_end < self.dormant_start:
            raise ValueError("dormant_end must be >= dormant_start")
        return self


class PipelineConfig(_Settings):
    world: WorldConfig = Field(default_factory=WorldConfig)
    train: TrainingConfig = Field(default_factory=TrainingConfig)
    prerank: TrainingConfig = Field(default_factory=lambda: TrainingConfig(epochs=2))
    multi: TrinityMConfig = Field(default_factory=TrinityMConfig)
    longtail: LongTailConfig = Field(default_factory=LongTailConfig)
    longterm: TrinityLConfig = Field(default_factory=TrinityLConfig)
    rerank: RerankConfig = Field(default_factory=RerankConfig)
    baseline_k: int = Field(50, ge=1)
    impression_quota: int = Field(20, ge=1)
    enable_lt: bool = True

    def reseeded(self, seed):
        """Derive every stage seed from one global seed"""
        stages = ("world", "train", "prerank", "multi", "longtail", "longterm", "rerank")
        update = {
            name: getattr(self, name).model_copy(update={"seed": seed + offset})
            for offset, name in enumerate(stages)
        }
        return self.model_copy(update=update)


def _nest(flat):
    """Turn {'a.b': v} into {'a': {'b': v}}"""
    nested = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot mix a section and a scalar")
        node[parts[-1]] = value
    return nested


def _env_overrides():
    overrides = {}
    for key, value in os.environ.items():
        if key.startswith(ENV_PREFIX):
            overrides[key[len(ENV_PREFIX):].lower().replace("__", ".")] = value
    return overrides


def parse_config(values, model_cls, overrides=None):
    """Validate a flat key=value mapping against a settings model"""
    flat = dict(values)
    flat.update(_env_overrides())
    flat.update(overrides or {})
    flat = {k: v for k, v in flat.items() if v is not None}
    try:
        return model_cls.model_validate(_nest(flat))
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigError(field, first["msg"]) from e


def load_config(path, model_cls, overrides=None):
    """Read a key=value config file into a validated settings model"""
    if path is None:
        return parse_config({}, model_cls, overrides)
    if not os.path.isfile(path):
        raise ConfigError("config", f"file not found: {path}")
    values = dotenv_values(path)
    config = parse_config(values, model_cls, overrides)
    logger.debug(f"📄 Loaded {model_cls.__name__} from {path}")
    return config


def config_hash(config):
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
