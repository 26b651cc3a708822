import os

import pytest

from config import (
    LongTailConfig,
    PipelineConfig,
    TrinityLConfig,
    TrinityMConfig,
    config_hash,
    load_config,
    parse_config,
)
from errors import ConfigError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for key in list(os.environ):
        if key.startswith("TRINITY_"):
            monkeypatch.delenv(key)


def test_defaults():
    cfg = PipelineConfig()
    assert (cfg.multi.t_p, cfg.multi.t_s, cfg.multi.n_m) == (30, 10, 10)
    assert (cfg.longtail.t_i, cfg.longtail.n_c, cfg.longtail.n_lt) == (3, 600, 20)
    assert (cfg.longtail.alpha_smp, cfg.longtail.beta_smp, cfg.longtail.alpha_ema) == (0.75, 0.1, 0.1)
    assert (cfg.longterm.t_c, cfg.longterm.n_s, cfg.longterm.n_l) == (3, 200, 20)
    assert cfg.rerank.budget == 1000
    assert cfg.train.window == 2500


def test_key_value_file(tmp_path):
    path = tmp_path / "trinity.env"
    path.write_text("# stage settings\nmulti.t_p=40\nmulti.n_m=5\nlongterm.t_c=inf\nworld.seed=3\n", encoding="utf-8")
    cfg = load_config(str(path), PipelineConfig)
    assert cfg.multi.t_p == 40
    assert cfg.multi.n_m == 5
    assert cfg.longterm.t_c is None
    assert cfg.world.seed == 3


def test_env_overrides_file(tmp_path, monkeypatch):
    path = tmp_path / "trinity.env"
    path.write_text("multi.n_m=5\n", encoding="utf-8")
    monkeypatch.setenv("TRINITY_MULTI__N_M", "7")
    monkeypatch.setenv("TRINITY_RERANK__BUDGET", "12")
    cfg = load_config(str(path), PipelineConfig)
    assert cfg.multi.n_m == 7
    assert cfg.rerank.budget == 12


def test_explicit_overrides_win(monkeypatch):
    monkeypatch.setenv("TRINITY_MULTI__N_M", "7")
    cfg = parse_config({}, PipelineConfig, {"multi.n_m": 9, "multi.t_s": None})
    assert cfg.multi.n_m == 9
    assert cfg.multi.t_s == 10


def test_invalid_value_names_field():
    with pytest.raises(ConfigError) as exc:
        parse_config({"longtail.n_lt": "0"}, PipelineConfig)
    assert exc.value.field == "longtail.n_lt"


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_config({"multi.n_mm": "3"}, PipelineConfig)
    assert "n_mm" in exc.value.field


def test_missing_file_names_path(tmp_path):
    missing = tmp_path / "nope.env"
    with pytest.raises(ConfigError) as exc:
        load_config(str(missing), PipelineConfig)
    assert str(missing) in str(exc.value)


def test_threshold_order_enforced():
    with pytest.raises(ValueError):
        TrinityMConfig(t_p=5, t_s=6)


def test_unknown_sampler_rejected():
    with pytest.raises(ValueError):
        LongTailConfig(sampler="greedy")


@pytest.mark.parametrize("raw", ["inf", "none", "INF"])
def test_unbounded_cluster_cap(raw):
    assert TrinityLConfig(t_c=raw).t_c is None


def test_hash_is_stable_and_sensitive():
    assert config_hash(PipelineConfig()) == config_hash(PipelineConfig())
    assert config_hash(PipelineConfig()) != config_hash(PipelineConfig().reseeded(1))


def test_reseeded_derives_stage_seeds():
    cfg = PipelineConfig().reseeded(100)
    assert cfg.world.seed == 100
    assert cfg.rerank.seed == 106
    assert len({cfg.world.seed, cfg.train.seed, cfg.multi.seed, cfg.longterm.seed}) == 4
