import orjson
import pytest
import yaml

from lbsim.errors import ConfigError
from lbsim.harness.config import config_hash, deep_merge, load_config, named_config

DOC = {"name": "tiny", "schedule": {"episodes": 3}, "cbf": {"radius": 0.2}}


@pytest.fixture
def clean_env(monkeypatch):
    for var in ("LBSIM_OUTPUT_DIR", "LBSIM_SEED", "LBSIM_WORKERS"):
        monkeypatch.delenv(var, raising=False)
    return monkeypatch


class TestLoadConfig:
    """Config files, environment and overrides."""

    def test_defaults(self, clean_env):
        cfg = load_config()
        assert cfg.env.rho_max == 0.999
        assert cfg.env.sigma == 0.8
        assert cfg.cbf.n_solutions == 450 and cfg.cbf.max_iter == 20
        assert cfg.schedule.gamma == 0.7
        assert cfg.agent.hidden == (1024, 1024, 1024)
        assert cfg.eval.static_path == 1

    @pytest.mark.parametrize("suffix", [".toml", ".json", ".yaml"])
    def test_formats(self, clean_env, tmp_path, suffix):
        path = tmp_path / f"cfg{suffix}"
        if suffix == ".toml":
            path.write_text('name = "tiny"\n[schedule]\nepisodes = 3\n[cbf]\nradius = 0.2\n')
        elif suffix == ".json":
            path.write_bytes(orjson.dumps(DOC))
        else:
            path.write_text(yaml.safe_dump(DOC))
        cfg = load_config(path)
        assert (cfg.name, cfg.schedule.episodes, cfg.cbf.radius) == ("tiny", 3, 0.2)

    @pytest.mark.parametrize("name", ["default", "desk", "profile_b"])
    def test_shipped_configs(self, clean_env, name):
        cfg = load_config(named_config(name))
        assert cfg.name == name

    def test_profile_b_capacities(self, clean_env):
        topo = load_config(named_config("profile_b")).topology.build()
        assert sorted(set(topo.capacities.tolist())) == [7.5, 25.0]

    def test_env_overrides(self, clean_env, tmp_path):
        clean_env.setenv("LBSIM_SEED", "42")
        clean_env.setenv("LBSIM_WORKERS", "3")
        clean_env.setenv("LBSIM_OUTPUT_DIR", str(tmp_path))
        cfg = load_config()
        assert cfg.schedule.seed == cfg.traffic.seed == cfg.cbf.seed == 42
        assert cfg.schedule.workers == 3
        assert cfg.output_dir == tmp_path

    def test_explicit_override_wins(self, clean_env):
        clean_env.setenv("LBSIM_WORKERS", "3")
        cfg = load_config(overrides={"schedule": {"workers": 2, "episodes": None}})
        assert cfg.schedule.workers == 2
        assert cfg.schedule.episodes == 5000


class TestConfigErrors:

    def test_unknown_key(self, clean_env):
        with pytest.raises(ConfigError, match="Invalid experiment config"):
            load_config(overrides={"nonsense": 1})

    def test_base_below_amplitude(self, clean_env):
        with pytest.raises(ConfigError, match="below amplitude"):
            load_config(overrides={"traffic": {"base": 1.0, "amplitude": 2.0}})

    def test_static_path_out_of_range(self, clean_env):
        with pytest.raises(ConfigError, match="static_path"):
            load_config(overrides={"eval": {"static_path": 2}})

    def test_capacities_come_in_pairs(self, clean_env):
        with pytest.raises(ConfigError, match="together"):
            load_config(overrides={"topology": {"c_hi": 30.0}})

    def test_rho_max_range(self, clean_env):
        with pytest.raises(ConfigError):
            load_config(overrides={"env": {"rho_max": 1.0}})

    def test_missing_and_unsupported(self, clean_env, tmp_path):
        with pytest.raises(ConfigError, match="Missing"):
            load_config(tmp_path / "nope.toml")
        ini = tmp_path / "cfg.ini"
        ini.write_text("[x]")
        with pytest.raises(ConfigError, match="Unsupported"):
            load_config(ini)

    def test_parse_failure(self, clean_env, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("name = ")
        with pytest.raises(ConfigError, match="parse"):
            load_config(path)


class TestConfigHash:

    def test_ignores_output_dir(self, clean_env):
        a = load_config(overrides={"output_dir": "/tmp/a"})
        b = load_config(overrides={"output_dir": "/tmp/b"})
        assert config_hash(a) == config_hash(b)

    def test_tracks_settings(self, clean_env):
        a = load_config(overrides={"schedule": {"episodes": 1}})
        b = load_config(overrides={"schedule": {"episodes": 2}})
        assert config_hash(a) != config_hash(b)


def test_deep_merge_skips_none():
    merged = deep_merge({"a": {"b": 1, "c": 2}}, {"a": {"b": None, "c": 3}, "d": None})
    assert merged == {"a": {"b": 1, "c": 3}}


def test_deep_merge_drops_none_under_new_sections():
    merged = deep_merge({}, {"cbf": {"enabled": True, "radius": None}, "agent": {"algo": None}})
    assert merged == {"cbf": {"enabled": True}, "agent": {}}


def test_sparse_overrides_without_file(clean_env):
    cfg = load_config(overrides={"agent": {"algo": "ddpg"},
                                 "cbf": {"enabled": False, "radius": None, "eta": None}})
    assert cfg.agent.algo == "ddpg" and cfg.cbf.enabled is False
    assert cfg.cbf.radius == 0.3
