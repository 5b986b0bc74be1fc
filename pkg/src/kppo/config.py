"""Run configuration: a YAML file mapping one-to-one onto RunConfig.

Every optimization hyperparameter is a named key with a production default;
model endpoints, dataset paths, and the working directory come from the same
file. API keys are only ever read from the environment.
"""

from __future__ import annotations

import hashlib
import importlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import yaml

from .errors import ConfigurationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    adapter: str = "http"  # http | scripted
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "KPPO_API_KEY"
    temperature: float = 0.0
    max_tokens: int = 512
    timeout: float = 60.0
    max_attempts: int = 5
    backoff: float = 0.5
    handler: str = ""  # dotted path "pkg.module:factory" for scripted adapters

    def __post_init__(self) -> None:
        if self.adapter not in ("http", "scripted"):
            raise ConfigurationError(f"unknown adapter kind {self.adapter!r}")


@dataclass(frozen=True)
class SplitSpec:
    train: int = 150
    val: int = 50
    test: int = 100
    val_as_test: bool = False


@dataclass(frozen=True)
class RunConfig:
    batch_size: int = 5
    window_size: int = 10
    iterations: int = 60
    candidates_per_parent: int = 4
    beam_width: int = 2
    max_children: int = 16
    max_balance_factor: float = 8.0
    pruning: bool = False
    seed: int = 0
    prompt_char_budget: int = 8000
    parallelism: int = 4
    task_path: str = ""
    initial_prompt_path: str = ""
    workdir: str = "run"
    templates_dir: str = ""
    optimizer_model: ModelConfig = field(
        default_factory=lambda: ModelConfig(temperature=0.7, max_tokens=4096)
    )
    target_model: ModelConfig = field(default_factory=ModelConfig)
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self) -> None:
        counts = {
            "batch_size": self.batch_size,
            "window_size": self.window_size,
            "candidates_per_parent": self.candidates_per_parent,
            "beam_width": self.beam_width,
            "max_children": self.max_children,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {value}")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.max_balance_factor <= 0:
            raise ConfigurationError("max_balance_factor must be > 0")
        if self.prompt_char_budget < 1:
            raise ConfigurationError("prompt_char_budget must be >= 1")
        if self.window_size < self.batch_size:
            log.warning(
                "window_size (%d) is smaller than batch_size (%d); the evaluation "
                "window will not cover the whole batch",
                self.window_size,
                self.batch_size,
            )

    def to_dict(self) -> dict:
        """Canonical mapping, same shape the YAML config file uses."""
        data = asdict(self)
        data["models"] = {
            "optimizer": data.pop("optimizer_model"),
            "target": data.pop("target_model"),
        }
        return data

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def workdir_path(self) -> Path:
        return Path(self.workdir)


def _build(cls, raw: dict, context: str):
    known = {f: raw[f] for f in raw if f in cls.__dataclass_fields__}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown {context} keys: {sorted(unknown)}")
    return cls(**known)


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw or {})
    models = raw.pop("models", {}) or {}
    split = raw.pop("split", {}) or {}
    parsed: dict = dict(raw)
    if "optimizer" in models:
        parsed["optimizer_model"] = _build(ModelConfig, models.pop("optimizer"), "optimizer model")
    if "target" in models:
        parsed["target_model"] = _build(ModelConfig, models.pop("target"), "target model")
    if models:
        raise ConfigurationError(f"unknown model roles: {sorted(models)}")
    parsed["split"] = _build(SplitSpec, split, "split")
    return _build(RunConfig, parsed, "config")


def load_config(path: Path, seed_override: Optional[int] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must contain a mapping")
    # relative paths resolve against the config file location
    base = path.parent
    for key in ("task_path", "initial_prompt_path", "workdir", "templates_dir"):
        value = raw.get(key)
        if value and not os.path.isabs(value):
            raw[key] = str((base / value).resolve())
    if seed_override is not None:
        raw["seed"] = seed_override
    return config_from_dict(raw)


def resolve_handler(dotted: str) -> Callable:
    """Import ``package.module:name`` and return the named callable."""
    module_name, _, attr = dotted.partition(":")
    if not module_name or not attr:
        raise ConfigurationError(
            f"handler {dotted!r} must look like 'package.module:callable'"
        )
    try:
        module = importlib.import_module(module_name)
        return getattr(module, attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigurationError(f"cannot import handler {dotted!r}: {exc}") from exc
