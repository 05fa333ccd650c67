"""Configuration loading, layering, and validation."""

import pytest

from icx.config import Config, load_config
from icx.errors import SchemaError


class TestDefaults:
    def test_defaults(self):
        cfg = Config()
        assert cfg.k == 8
        assert cfg.max_steps == 5
        assert cfg.planner_mode == "rule"
        assert cfg.retrieval_mode == "cascaded-text-then-visual"
        assert cfg.resource_preference == "balanced"
        assert cfg.overfetch_factor == 4
        assert cfg.agentic_pool_factor == 1.5
        assert cfg.policy_endpoints == {}

    def test_zero_k_allowed(self):
        assert Config(k=0).k == 0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"k": -1},
            {"max_steps": 0},
            {"overfetch_factor": 0},
            {"agentic_pool_factor": 0.5},
            {"max_concurrency": 0},
            {"planner_mode": "vibes"},
            {"retrieval_mode": "sideways"},
            {"resource_preference": "extreme"},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(SchemaError):
            Config(**kwargs)

    def test_rejects_unknown_endpoint_role(self):
        with pytest.raises(SchemaError, match="role"):
            Config(policy_endpoints={"barista": "http://x/v1"})


class TestFileLayer:
    def test_loads_toml(self, tmp_path):
        corpus = tmp_path / "c.jsonl"
        corpus.write_text("")
        f = tmp_path / "icx.toml"
        f.write_text(
            f'k = 4\nmax_steps = 2\ncorpus_path = "{corpus}"\n'
            '[policy_endpoints]\ndownstream = "http://a/v1"\n'
        )
        cfg = load_config(f)
        assert cfg.k == 4
        assert cfg.max_steps == 2
        assert cfg.corpus_path == str(corpus)
        assert cfg.policy_endpoints == {"downstream": "http://a/v1"}

    def test_unknown_key_rejected(self, tmp_path):
        f = tmp_path / "icx.toml"
        f.write_text("shots = 3\n")
        with pytest.raises(SchemaError, match="shots"):
            load_config(f)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(SchemaError, match="not found"):
            load_config(tmp_path / "absent.toml")

    def test_invalid_toml_rejected(self, tmp_path):
        f = tmp_path / "icx.toml"
        f.write_text("k = = 3\n")
        with pytest.raises(SchemaError, match="TOML"):
            load_config(f)

    def test_endpoints_must_be_table(self, tmp_path):
        f = tmp_path / "icx.toml"
        f.write_text('policy_endpoints = "http://a/v1"\n')
        with pytest.raises(SchemaError, match="table"):
            load_config(f)


class TestEnvLayer:
    def test_env_scalars_coerced(self):
        cfg = load_config(None, env={"ICX_K": "6", "ICX_AGENTIC_POOL_FACTOR": "2.0"})
        assert cfg.k == 6
        assert cfg.agentic_pool_factor == 2.0

    def test_env_endpoint(self):
        cfg = load_config(None, env={"ICX_ENDPOINT_FILTER": "http://env/v1"})
        assert cfg.policy_endpoints == {"filter": "http://env/v1"}

    def test_env_coercion_failure_names_variable(self):
        with pytest.raises(SchemaError, match="ICX_K"):
            load_config(None, env={"ICX_K": "eight"})

    def test_unrelated_env_ignored(self):
        cfg = load_config(None, env={"PATH": "/usr/bin", "ICXK": "9"})
        assert cfg.k == 8


class TestPrecedence:
    def test_overrides_beat_env_beat_file(self, tmp_path):
        f = tmp_path / "icx.toml"
        f.write_text("k = 4\nmax_steps = 2\n")
        cfg = load_config(f, env={"ICX_K": "6"}, overrides={"k": 12})
        assert cfg.k == 12
        assert cfg.max_steps == 2

    def test_env_beats_file(self, tmp_path):
        f = tmp_path / "icx.toml"
        f.write_text("k = 4\n")
        cfg = load_config(f, env={"ICX_K": "6"})
        assert cfg.k == 6

    def test_none_overrides_skipped(self, tmp_path):
        f = tmp_path / "icx.toml"
        f.write_text("k = 4\n")
        cfg = load_config(f, env={}, overrides={"k": None, "db_dir": None})
        assert cfg.k == 4
        assert cfg.db_dir == "icx-db"

    def test_endpoints_merge_by_role(self, tmp_path):
        f = tmp_path / "icx.toml"
        f.write_text(
            '[policy_endpoints]\ndownstream = "http://file/v1"\nfilter = "http://file/v1"\n'
        )
        cfg = load_config(f, env={"ICX_ENDPOINT_FILTER": "http://env/v1"})
        assert cfg.policy_endpoints == {
            "downstream": "http://file/v1",
            "filter": "http://env/v1",
        }


class TestPathChecks:
    def test_missing_corpus_rejected(self, tmp_path):
        with pytest.raises(SchemaError, match="corpus"):
            load_config(None, overrides={"corpus_path": str(tmp_path / "nope.jsonl")})

    def test_db_dir_may_not_exist(self, tmp_path):
        cfg = load_config(None, overrides={"db_dir": str(tmp_path / "fresh-db")})
        assert cfg.db_dir.endswith("fresh-db")

    def test_existing_paths_accepted(self, tmp_path):
        corpus = tmp_path / "c.jsonl"
        corpus.write_text("")
        spec = tmp_path / "bench.json"
        spec.write_text("{}")
        cfg = load_config(
            None,
            overrides={"corpus_path": str(corpus), "bench_spec_path": str(spec)},
        )
        assert cfg.corpus_path == str(corpus)
        assert cfg.bench_spec_path == str(spec)
