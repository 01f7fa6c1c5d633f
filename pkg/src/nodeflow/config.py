"""Run configuration.

Values come from, in increasing priority: built-in defaults, a config file,
``NODEFLOW_*`` environment variables and command-line flags. The config file
is INI text with a single ``[run]`` section::

    [run]
    model = gpt-4o
    step_budget = 5
    backend = simulated

Credentials are read from the environment only (``NODEFLOW_API_KEY``, or
``OPENAI_API_KEY`` as a fallback) and are masked whenever the config is
written out.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Union

ENV_PREFIX = "NODEFLOW_"
SECRET_FIELDS = ("api_key",)
POSITIVE_FIELDS = (
    "step_budget", "refine_attempts", "retrieval_k", "demonstrations", "parallelism",
    "max_attempts", "poll_budget", "frame_cap", "judge_votes", "sc_trajectories",
)


class ConfigError(ValueError):
    pass


def demo_path(*parts: str) -> str:
    return str(resources.files("nodeflow").joinpath("data", "demo", *parts))


@dataclass(frozen=True)
class RunConfig:
    model: str = "gpt-4o"
    judge_model: str = "gpt-4o"
    embedding_model: str = "text-embedding-3-large"
    llm_base_url: str = "https://api.openai.com/v1"
    embedding_base_url: str = "https://api.openai.com/v1"
    embedder: str = "hash"  # hash | http
    api_key: Optional[str] = None
    step_budget: int = 5
    refine_attempts: int = 2
    retrieval_k: int = 5
    demonstrations: int = 3
    sc_trajectories: int = 3
    sc_temperature: float = 0.7
    parallelism: int = 4
    max_attempts: int = 3
    frame_cap: int = 10
    judge_votes: int = 1
    representation: str = "code"
    backend: str = "simulated"  # simulated | live
    server_url: str = "http://127.0.0.1:8188"
    poll_budget: float = 600.0
    registry: str = ""
    corpus: str = ""
    tasks: str = ""
    output_dir: str = "runs"
    cache_dir: str = ""
    seed: int = 0

    def __post_init__(self) -> None:
        for name in POSITIVE_FIELDS:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.backend not in ("simulated", "live"):
            raise ConfigError(f"backend must be 'simulated' or 'live', got {self.backend!r}")
        if self.embedder not in ("hash", "http"):
            raise ConfigError(f"embedder must be 'hash' or 'http', got {self.embedder!r}")
        if self.representation not in ("code", "json", "elements"):
            raise ConfigError(f"representation must be code, json or elements, got {self.representation!r}")
        if not self.registry:
            object.__setattr__(self, "registry", demo_path("nodes"))
        if not self.corpus:
            object.__setattr__(self, "corpus", demo_path("curriculum"))

    def to_json(self) -> dict:
        data = asdict(self)
        for name in SECRET_FIELDS:
            if data[name]:
                data[name] = "***"
        return data

    def __repr__(self) -> str:
        shown = ", ".join(f"{k}={v!r}" for k, v in self.to_json().items())
        return f"RunConfig({shown})"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(name: str, raw: object) -> object:
    kind = _FIELDS[name].type
    if raw is None:
        return None
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {raw!r}") from None
    return str(raw)


def read_config_file(path: Union[str, Path]) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not parser.has_section("run"):
        raise ConfigError(f"{path}: missing [run] section")
    values = {}
    for key, raw in parser.items("run"):
        if key in SECRET_FIELDS:
            raise ConfigError(f"{path}: {key} must come from the environment, not the config file")
        if key not in _FIELDS:
            raise ConfigError(f"{path}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def read_environment(env: Mapping[str, str]) -> dict:
    values = {}
    for name in _FIELDS:
        raw = env.get(ENV_PREFIX + name.upper())
        if raw not in (None, ""):
            values[name] = _convert(name, raw)
    if "api_key" not in values and env.get("OPENAI_API_KEY"):
        values["api_key"] = env["OPENAI_API_KEY"]
    return values


def load_config(
    path: Union[str, Path, None] = None,
    env: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, object]] = None,
) -> RunConfig:
    """Merge defaults < file < environment < overrides (flags). ``None``
    overrides are ignored so unset flags do not mask lower layers."""
    values: dict = {}
    if path:
        values.update(read_config_file(path))
    values.update(read_environment(os.environ if env is None else env))
    for key, value in (overrides or {}).items():
        if value is not None:
            if key not in _FIELDS:
                raise ConfigError(f"unknown setting {key!r}")
            values[key] = _convert(key, value)
    return replace(RunConfig(), **values)
