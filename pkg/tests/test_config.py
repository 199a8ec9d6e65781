import json

import pytest

from stackplanner.config import DEFAULTS, ConfigError, load_settings, read_config_file
from stackplanner.gateway import ENV_API_KEY, ENV_MODEL


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("gateway:\n  model: from-file\n  temperature: 0.3\nruntime:\n  max_steps: 9\n")
    return path


def test_defaults_only():
    s = load_settings(env={})
    assert s.get("runtime", "max_steps") == 25
    assert s.source("runtime", "max_steps") == "default"
    assert s.section("grpo") == DEFAULTS["grpo"]


def test_flag_beats_env_beats_file(config_file):
    env = {"STACKPLANNER_GATEWAY_MODEL": "from-env", "STACKPLANNER_RUNTIME_MAX_STEPS": "12"}
    s = load_settings(config_file, {("gateway", "model"): "from-flag", ("runtime", "max_steps"): None}, env)
    assert s.get("gateway", "model") == "from-flag" and s.source("gateway", "model") == "flag"
    assert s.get("runtime", "max_steps") == 12 and s.source("runtime", "max_steps") == "env"
    assert s.get("gateway", "temperature") == 0.3 and s.source("gateway", "temperature") == "file"
    assert s.get("gateway", "timeout") == 60.0


def test_documented_llm_variables(config_file):
    s = load_settings(config_file, env={ENV_MODEL: "alias-model", ENV_API_KEY: "k"})
    assert s.get("gateway", "model") == "alias-model"
    assert s.get("gateway", "api_key") == "k"
    # the namespaced variable wins over the alias
    s = load_settings(env={ENV_MODEL: "alias", "STACKPLANNER_GATEWAY_MODEL": "namespaced"})
    assert s.get("gateway", "model") == "namespaced"


def test_type_coercion():
    s = load_settings(env={"STACKPLANNER_RUNTIME_CURATE": "off", "STACKPLANNER_GRPO_BETA": "0.1"})
    assert s.get("runtime", "curate") is False
    assert s.get("grpo", "beta") == 0.1
    with pytest.raises(ConfigError):
        load_settings(env={"STACKPLANNER_RUNTIME_MAX_STEPS": "many"})
    with pytest.raises(ConfigError):
        load_settings(env={"STACKPLANNER_RUNTIME_CURATE": "maybe"})


def test_json_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"grpo": {"seed": 3}}))
    assert read_config_file(path) == {"grpo": {"seed": 3}}


def test_config_file_errors(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("planner:\n  x: 1\n")
    with pytest.raises(ConfigError, match="section"):
        read_config_file(path)
    path.write_text("runtime:\n  max_stepz: 1\n")
    with pytest.raises(ConfigError, match="max_stepz"):
        read_config_file(path)
    path.write_text("runtime: [1, 2]\n")
    with pytest.raises(ConfigError):
        read_config_file(path)
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        load_settings(flags={("runtime", "nope"): 1}, env={})
