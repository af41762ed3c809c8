import json

import pytest

from medrec.config import (ConfigError, RunConfig, apply_overrides, config_hash,
                           desk_scale_config, echo_config, from_dict, load_config,
                           to_dict)


class TestRoundTrip:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        again = from_dict(to_dict(cfg))
        assert to_dict(again) == to_dict(cfg)

    def test_published_table_defaults(self):
        cfg = RunConfig()
        assert cfg.encoder.embed_dim == 300
        assert cfg.encoder.n_layers == 2
        assert cfg.encoder.n_heads == 2
        assert cfg.encoder.max_len == 100
        assert cfg.pretrain.batch_size == 64
        assert cfg.pretrain.learning_rate == pytest.approx(5e-4)
        assert cfg.tune.learning_rate == pytest.approx(5e-4)
        assert cfg.tune.prompt_count == 2
        assert cfg.tune.threshold == pytest.approx(0.3)
        assert cfg.seeds == (42, 43, 44, 45, 46)

    def test_config_file_round_trip(self, tmp_path):
        cfg = desk_scale_config()
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(to_dict(cfg)))
        assert to_dict(load_config(path)) == to_dict(cfg)


class TestValidation:
    def test_unknown_section_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            from_dict({"encoder": {"embed_dims": 8}})

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="top-level"):
            from_dict({"encoders": {}})

    def test_field_invariants_enforced(self):
        with pytest.raises(ConfigError, match="heterogeneity"):
            from_dict({"generator": {"heterogeneity": 2.0}})
        with pytest.raises(ConfigError, match="divisible"):
            from_dict({"encoder": {"embed_dim": 7, "n_heads": 2}})
        with pytest.raises(ConfigError, match="regime"):
            from_dict({"regimes": ["prompt", "bogus"]})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.json")


class TestOverrides:
    def test_dotted_override(self):
        cfg = apply_overrides(RunConfig(), ["pretrain.learning_rate=1e-3",
                                            "encoder.embed_dim=64"])
        assert cfg.pretrain.learning_rate == pytest.approx(1e-3)
        assert cfg.encoder.embed_dim == 64

    def test_boolean_override(self):
        cfg = apply_overrides(RunConfig(), ["encoder.shared_towers=false"])
        assert cfg.encoder.shared_towers is False

    def test_tuple_override(self):
        cfg = apply_overrides(RunConfig(), ["seeds=1,2,3"])
        assert cfg.seeds == (1, 2, 3)

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            apply_overrides(RunConfig(), ["pretrain.warmup=1"])


class TestHashAndEcho:
    def test_hash_stable_and_sensitive(self):
        assert config_hash(RunConfig()) == config_hash(RunConfig())
        tweaked = apply_overrides(RunConfig(), ["pretrain.seed=99"])
        assert config_hash(tweaked) != config_hash(RunConfig())

    def test_echo_reproduces_config(self, tmp_path):
        cfg = desk_scale_config(seed=43)
        echo_config(cfg, tmp_path)
        reread = load_config(tmp_path / "config.json")
        assert config_hash(reread) == config_hash(cfg)

    def test_with_seed_touches_every_stage(self):
        cfg = RunConfig().with_seed(7)
        assert cfg.generator.seed == 7
        assert cfg.pretrain.seed == 7
        assert cfg.tune.seed == 7
