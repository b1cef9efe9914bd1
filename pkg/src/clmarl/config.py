"""Flat key-value run configuration: parse, validate, override, hash.

The on-disk format is INI-like with one section per module:

    [run]
    total_env_steps = 200000
    [env]
    n_enemies = 3
    [flexdiff]
    window_len = 20
    [learner]
    lam = 0.5

Keys map 1:1 onto dataclass fields; unknown sections or keys are rejected
with a diagnostic naming the offender. Overrides use dotted keys
(``flexdiff.window_len=10``). The canonical serialization (sorted sections,
declaration-ordered keys, repr'd floats) feeds a SHA-256 config hash that
addresses runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .cgrpa import LearnerConfig
from .env import BattleConfig
from .flexdiff import SchedulerConfig


class ConfigError(ValueError):
    """Invalid configuration file, key, or value."""


@dataclass(frozen=True)
class RunConfig:
    """Orchestration constants for one training run."""

    total_env_steps: int = 200_000
    eval_interval: int = 10_000      # env steps per evaluation/scheduling cycle
    eval_rollouts: int = 32
    target_difficulty: int = 7       # fixed reporting difficulty
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_steps: int = 50_000
    k_grad: int = 8                  # gradient steps per learner invocation
    train_every: int = 1             # episodes collected between invocations
    scheduler_enabled: bool = True
    cgrpa_enabled: bool = True
    top_k: int = 20
    checkpoint_interval_cycles: int = 50
    write_figures: bool = True

    def validate(self) -> None:
        if self.total_env_steps < 1:
            raise ConfigError("run.total_env_steps must be >= 1")
        if self.eval_interval < 1:
            raise ConfigError("run.eval_interval must be >= 1")
        if self.eval_rollouts < 1:
            raise ConfigError("run.eval_rollouts must be >= 1")
        if not 1 <= self.target_difficulty <= 10:
            raise ConfigError("run.target_difficulty must be in [1, 10]")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ConfigError("run.epsilon schedule needs 0 <= end <= start <= 1")
        if self.epsilon_anneal_steps < 1:
            raise ConfigError("run.epsilon_anneal_steps must be >= 1")
        if self.k_grad < 0:
            raise ConfigError("run.k_grad must be >= 0")
        if self.train_every < 1:
            raise ConfigError("run.train_every must be >= 1")
        if self.top_k < 1:
            raise ConfigError("run.top_k must be >= 1")
        if self.checkpoint_interval_cycles < 1:
            raise ConfigError("run.checkpoint_interval_cycles must be >= 1")


SECTION_TYPES = {
    "run": RunConfig,
    "env": BattleConfig,
    "flexdiff": SchedulerConfig,
    "learner": LearnerConfig,
}


@dataclass(frozen=True)
class FullConfig:
    run: RunConfig
    env: BattleConfig
    flexdiff: SchedulerConfig
    learner: LearnerConfig

    def validate(self) -> None:
        self.run.validate()
        try:
            self.env.validate()
            self.flexdiff.validate()
            self.learner.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def default_config() -> FullConfig:
    return FullConfig(run=RunConfig(), env=BattleConfig(),
                      flexdiff=SchedulerConfig(), learner=LearnerConfig())


def _parse_value(raw: str, target_type, dotted: str):
    raw = raw.strip()
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{dotted}: expected a boolean, got {raw!r}")
    try:
        if target_type is int:
            return int(raw.replace("_", ""))
        if target_type is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{dotted}: {exc}") from exc
    return raw


def _field_types(section_cls) -> dict[str, type]:
    return {f.name: f.type if isinstance(f.type, type) else type(f.default)
            for f in fields(section_cls)}


def apply_override(cfg: FullConfig, dotted_key: str, raw_value: str) -> FullConfig:
    """Return a new config with one dotted-key override applied."""
    section_name, sep, key = dotted_key.partition(".")
    if not sep:
        raise ConfigError(f"override {dotted_key!r} must look like section.key")
    if section_name not in SECTION_TYPES:
        raise ConfigError(
            f"unknown section {section_name!r}; valid: {sorted(SECTION_TYPES)}")
    section = getattr(cfg, section_name)
    types = _field_types(type(section))
    if key not in types:
        raise ConfigError(
            f"unknown key {dotted_key!r}; section [{section_name}] has: "
            f"{sorted(types)}")
    value = _parse_value(raw_value, types[key], dotted_key)
    return replace(cfg, **{section_name: replace(section, **{key: value})})


def apply_overrides(cfg: FullConfig, overrides: dict[str, str]) -> FullConfig:
    for dotted, raw in overrides.items():
        cfg = apply_override(cfg, dotted, raw)
    return cfg


def parse_text(text: str, base: FullConfig | None = None) -> FullConfig:
    cfg = base or default_config()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTION_TYPES:
                raise ConfigError(
                    f"line {lineno}: unknown section [{section}]; valid: "
                    f"{sorted(SECTION_TYPES)}")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        cfg = apply_override(cfg, f"{section}.{key.strip()}", value)
    return cfg


def load_file(path: str, overrides: dict[str, str] | None = None) -> FullConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    cfg = parse_text(text)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def serialize(cfg: FullConfig) -> str:
    """Canonical text form; parsing it back reproduces the config exactly."""
    chunks = []
    for section_name in sorted(SECTION_TYPES):
        section = getattr(cfg, section_name)
        chunks.append(f"[{section_name}]")
        for f in fields(type(section)):
            value = getattr(section, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            chunks.append(f"{f.name} = {text}")
        chunks.append("")
    return "\n".join(chunks)


def config_hash(cfg: FullConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()[:12]
