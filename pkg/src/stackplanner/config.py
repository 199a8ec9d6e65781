"""Layered settings: command-line flag > environment > config file > default.

Config files are YAML or JSON with the sections ``runtime``, ``gateway``,
``tools``, ``memory`` and ``grpo``. Any key can also come from the
environment as ``STACKPLANNER_<SECTION>_<KEY>`` (upper case); the gateway
credentials additionally honour the documented LLM variables.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .gateway import ENV_API_KEY, ENV_BASE_URL, ENV_MODEL


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "runtime": {
        "max_steps": 25,
        "max_reparse": 2,
        "delegate_context_budget": 1024,
        "search_max_iters": 6,
        "curate": True,
        "deterministic": False,
    },
    "gateway": {
        "backend": "remote",
        "script": None,
        "fixture": None,
        "base_url": None,
        "api_key": None,
        "model": "default",
        "temperature": 0.0,
        "timeout": 60.0,
        "max_attempts": 4,
    },
    "tools": {
        "source": "remote",
        "timeout": 10.0,
        "wiki_url": None,
    },
    "memory": {
        "token_budget": 4096,
        "store": None,
        "experience_top_k": 5,
    },
    "grpo": {
        "seed": 7,
        "iterations": 300,
        "group_size": 8,
        "epsilon": 0.2,
        "beta": 0.0,
        "scope": "token",
        "step_size": 0.5,
    },
}

# documented variables that map onto config keys
ENV_ALIASES = {
    ENV_API_KEY: ("gateway", "api_key"),
    ENV_BASE_URL: ("gateway", "base_url"),
    ENV_MODEL: ("gateway", "model"),
}

# numeric/boolean keys whose defaults are None would otherwise stay strings
_TYPES: dict[tuple[str, str], type] = {}


def _coerce(section: str, key: str, value: Any) -> Any:
    default = DEFAULTS[section][key]
    kind = _TYPES.get((section, key)) or (type(default) if default is not None else str)
    if value is None or isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    if kind is bool:
        if isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
        raise ConfigError(f"{section}.{key}: expected a boolean, got {value!r}")
    try:
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: expected {kind.__name__}, got {value!r}") from None


def read_config_file(path: str | os.PathLike) -> dict[str, dict[str, Any]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    doc = doc or {}
    if not isinstance(doc, Mapping):
        raise ConfigError(f"config {path} must be a mapping of sections")
    out: dict[str, dict[str, Any]] = {}
    for section, values in doc.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, Mapping):
            raise ConfigError(f"config section {section!r} must be a mapping")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            out.setdefault(section, {})[key] = _coerce(section, key, value)
    return out


def _from_env(env: Mapping[str, str]) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for var, (section, key) in ENV_ALIASES.items():
        if env.get(var):
            out.setdefault(section, {})[key] = env[var]
    for section, keys in DEFAULTS.items():
        for key in keys:
            var = f"STACKPLANNER_{section.upper()}_{key.upper()}"
            if var in env:
                out.setdefault(section, {})[key] = _coerce(section, key, env[var])
    return out


@dataclass
class Settings:
    values: dict[str, dict[str, Any]]
    sources: dict[tuple[str, str], str] = field(default_factory=dict)

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def source(self, section: str, key: str) -> str:
        return self.sources.get((section, key), "default")

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.values[name])


def load_settings(
    config_path: str | os.PathLike | None = None,
    flags: Mapping[tuple[str, str], Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> Settings:
    """Merge the layers; ``flags`` entries set to None count as absent."""
    env = os.environ if env is None else env
    values = {section: dict(keys) for section, keys in DEFAULTS.items()}
    sources: dict[tuple[str, str], str] = {}
    layers = [
        ("file", read_config_file(config_path) if config_path else {}),
        ("env", _from_env(env)),
    ]
    flag_layer: dict[str, dict[str, Any]] = {}
    for (section, key), value in (flags or {}).items():
        if key not in DEFAULTS.get(section, {}):
            raise ConfigError(f"unknown setting {section}.{key}")
        if value is not None:
            flag_layer.setdefault(section, {})[key] = _coerce(section, key, value)
    layers.append(("flag", flag_layer))
    for name, layer in layers:
        for section, keys in layer.items():
            for key, value in keys.items():
                values[section][key] = value
                sources[(section, key)] = name
    return Settings(values, sources)
