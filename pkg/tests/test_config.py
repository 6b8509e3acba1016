import pytest
import yaml

from meshsplat.config import EnvSettings, TrainConfig, dump_config, load_config, parse_overrides
from meshsplat.errors import ConfigError


def test_defaults():
    config = TrainConfig()
    assert config.stage1.steps == 20000
    assert config.stage2.steps == 40000
    assert config.population.cadence == 2000
    assert config.population.warmup == 5000
    assert config.beta == 0.9
    assert config.weights.stage2.w_l1 == 0.8


def test_normal_weight_follows_camera_mode():
    weights = TrainConfig().weights.stage2
    assert weights.normal_weight("static") == 0.1
    assert weights.normal_weight("orbit") == 0.0
    assert weights.model_copy(update={"w_normal": 0.3}).normal_weight("orbit") == 0.3


def test_overrides_are_typed():
    tree = parse_overrides(["--stage2.steps=500", "--weights.stage2.w_flow=0.5", "--population.pruning=false"])
    assert tree == {"stage2": {"steps": 500}, "weights": {"stage2": {"w_flow": 0.5}},
                    "population": {"pruning": False}}


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        parse_overrides(["stage2.steps=5"])
    with pytest.raises(ConfigError):
        parse_overrides(["--stage2.steps"])


def test_load_config_merges_file_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"seed": 3, "stage2": {"steps": 100}, "population": {"max_depth": 2}}))
    config = load_config(path, ["--stage2.steps=50"])
    assert config.seed == 3
    assert config.stage2.steps == 50
    assert config.population.max_depth == 2


@pytest.mark.parametrize("override", [
    "--stage1.steps=0",
    "--weights.stage2.w_edge=-1",
    "--population.cadence=0",
    "--offset_u_mode=sideways",
    "--not_a_field=1",
])
def test_invalid_values_raise_config_error(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_dump_round_trip(tmp_path):
    config = load_config(None, ["--seed=7", "--render.background=[0, 0, 0]"])
    dump_config(config, tmp_path / "config.resolved")
    assert load_config(tmp_path / "config.resolved") == config


def test_env_settings(monkeypatch):
    monkeypatch.setenv("MESHSPLAT_WORKERS", "4")
    monkeypatch.setenv("MESHSPLAT_LOG_LEVEL", "DEBUG")
    settings = EnvSettings.from_env()
    assert settings.workers == 4
    assert settings.log_level == "DEBUG"
    monkeypatch.setenv("MESHSPLAT_WORKERS", "many")
    with pytest.raises(ConfigError):
        EnvSettings.from_env()
