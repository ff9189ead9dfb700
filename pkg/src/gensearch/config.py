"""Runtime configuration: defaults < config file < environment < flags.

The config file is TOML (``.toml``) or JSON (any other suffix) with the
sections documented in the README. Unknown keys are rejected.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .datapipe import FilterRules
from .episode import EpisodeConfig
from .grpo import GrpoConfig
from .scoring import RewardConfig


class ConfigError(ValueError):
    pass


ENV_VARS = {
    "policy_url": "GENSEARCH_POLICY_URL",
    "search_url": "GENSEARCH_SEARCH_URL",
    "image_url": "GENSEARCH_IMAGE_URL",
    "browse_url": "GENSEARCH_BROWSE_URL",
    "judge_url": "GENSEARCH_JUDGE_URL",
    "api_key": "GENSEARCH_API_KEY",
}


@dataclass
class BackendConfig:
    policy_url: str | None = None
    search_url: str | None = None
    image_url: str | None = None
    browse_url: str | None = None
    judge_url: str | None = None
    api_key: str | None = None
    policy_model: str = "default"
    judge_model: str = "default"
    timeout: float = 120.0


@dataclass
class JudgeConfig:
    kscore_template: str | None = None
    text_template: str | None = None
    retries: int = 3
    parallel: int = 4


@dataclass
class CliConfig:
    backends: BackendConfig = field(default_factory=BackendConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    filter: FilterRules = field(default_factory=FilterRules)
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    output_dir: str = "."


_SECTIONS = {
    "backends": BackendConfig,
    "episode": EpisodeConfig,
    "reward": RewardConfig,
    "grpo": GrpoConfig,
    "filter": FilterRules,
    "judge": JudgeConfig,
}


def _build(cls: type, base: Any, values: Mapping[str, Any], where: str) -> Any:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    values = dict(values)
    if cls is RewardConfig and "weights" in values:
        values["weights"] = tuple(values["weights"])
    if cls is FilterRules and "min_scores" in values:
        values["min_scores"] = {**base.min_scores, **values["min_scores"]}
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        doc = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    return doc


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Mapping[str, Any]] | None = None,
    output_dir: str | None = None,
) -> CliConfig:
    """``overrides`` is ``{section: {key: value}}`` from flags; ``None`` values are skipped."""
    env = os.environ if env is None else env
    doc = read_config_file(path) if path else {}

    cfg = CliConfig()
    for key, value in doc.items():
        if key == "output_dir":
            cfg.output_dir = str(value)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            setattr(cfg, key, _build(_SECTIONS[key], getattr(cfg, key), value, key))
        else:
            raise ConfigError(f"unknown top-level key: {key}")

    from_env = {k: env[v] for k, v in ENV_VARS.items() if env.get(v)}
    if from_env:
        cfg.backends = _build(BackendConfig, cfg.backends, from_env, "env")

    for section, values in (overrides or {}).items():
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section}")
        setattr(cfg, section, _build(_SECTIONS[section], getattr(cfg, section), values, section))
    if output_dir is not None:
        cfg.output_dir = output_dir
    return cfg
