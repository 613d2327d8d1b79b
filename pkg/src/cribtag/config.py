"""Run configuration: a TOML file plus ``--set section.key=value`` overrides.

Sections map onto the component configs::

    [data]      public_manifest, lb_manifest, synth_white_noise, threads
    [frontend]  FrontendConfig fields
    [model]     preset = "full" | "tiny", then ModelConfig fields
    [train]     TrainConfig fields plus scheme / freeze / augment
    [augment]   AugmentConfig fields

Overrides always win over file values. The global seed resolves as:
explicit --seed flag, then [train].seed in the file, then the CRIBTAG_SEED
environment variable, then 0.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields as dc_fields, replace
from pathlib import Path
from typing import Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import AugmentConfig
from .dataset import Scheme
from .errors import ConfigError
from .frontend import FrontendConfig
from .model import ModelConfig
from .train import FreezePolicy, TrainConfig

SEED_ENV_VAR = "CRIBTAG_SEED"


@dataclass(frozen=True)
class DataConfig:
    public_manifest: Optional[str] = None
    lb_manifest: Optional[str] = None
    synth_white_noise: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.synth_white_noise < 0:
            raise ConfigError("synth_white_noise must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    frontend: FrontendConfig = FrontendConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    augment: AugmentConfig = AugmentConfig()
    augment_enabled: bool = True


_ENUM_FIELDS = {
    ("train", "scheme"): Scheme,
    ("train", "freeze_policy"): FreezePolicy,
    ("train", "freeze"): FreezePolicy,
}

_SECTION_TYPES = {
    "data": DataConfig,
    "frontend": FrontendConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
}


def _coerce(section: str, key: str, value: str):
    """Parse a string override into the type the target field expects."""
    enum_type = _ENUM_FIELDS.get((section, key))
    if enum_type is not None:
        return enum_type(value.lower())
    if section == "run":
        if key == "augment_enabled":
            return value.lower() in ("1", "true", "yes", "on")
        raise ConfigError(f"unknown run-level key {key!r}")
    cls = _SECTION_TYPES.get(section)
    if cls is None:
        raise ConfigError(f"unknown config section {section!r}")
    for f in dc_fields(cls):
        if f.name == key:
            break
    else:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    if "," in value or key in ("milestones", "head_dims"):
        return tuple(int(v) for v in value.split(",") if v.strip())
    for conv in (int, float):
        try:
            return conv(value)
        except ValueError:
            continue
    return value


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def _build_train(sec: dict, seed_flag: Optional[int]) -> tuple:
    sec = dict(sec)
    augment_enabled = bool(sec.pop("augment", True))
    if "freeze" in sec:
        sec["freeze_policy"] = sec.pop("freeze")
    for key, enum_type in ((("scheme"), Scheme), (("freeze_policy"), FreezePolicy)):
        if key in sec and isinstance(sec[key], str):
            try:
                sec[key] = enum_type(sec[key].lower())
            except ValueError:
                options = ", ".join(e.value for e in enum_type)
                raise ConfigError(f"[train] {key} must be one of: {options}") from None
    if "milestones" in sec and sec["milestones"] is not None:
        sec["milestones"] = tuple(sec["milestones"])
    if seed_flag is not None:
        sec["seed"] = seed_flag
    elif "seed" not in sec:
        env = os.environ.get(SEED_ENV_VAR)
        if env is not None:
            try:
                sec["seed"] = int(env)
            except ValueError:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from None
    try:
        return TrainConfig(**sec), augment_enabled
    except TypeError as e:
        raise ConfigError(f"[train]: {e}") from None


def _build_model(sec: dict) -> ModelConfig:
    sec = dict(sec)
    preset = sec.pop("preset", "full")
    if "head_dims" in sec:
        sec["head_dims"] = tuple(sec["head_dims"])
    try:
        if preset == "tiny":
            return ModelConfig.tiny(**sec)
        if preset == "full":
            return ModelConfig(**sec)
    except TypeError as e:
        raise ConfigError(f"[model]: {e}") from None
    raise ConfigError(f"[model] preset must be 'full' or 'tiny', got {preset!r}")


def _build(cls, name: str, sec: dict):
    try:
        return cls(**sec)
    except TypeError as e:
        raise ConfigError(f"[{name}]: {e}") from None


def load_run_config(
    path: Optional[str] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    """Assemble a RunConfig from an optional TOML file plus overrides.

    Each override is ``section.key=value``; values are coerced to the
    target field's type.
    """
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None

    sections = {name: _section(raw, name) for name in _SECTION_TYPES}
    run_section = _section(raw, "run")

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if section == "run":
            run_section[key] = _coerce(section, key, value)
        elif section in sections:
            sections[section][key] = _coerce(section, key, value)
        else:
            raise ConfigError(f"unknown config section {section!r}")

    train_cfg, augment_from_train = _build_train(sections["train"], seed)
    augment_sec = dict(sections["augment"])
    augment_sec.setdefault("seed", train_cfg.seed)
    return RunConfig(
        data=_build(DataConfig, "data", sections["data"]),
        frontend=_build(FrontendConfig, "frontend", sections["frontend"]),
        model=_build_model(sections["model"]),
        train=train_cfg,
        augment=_build(AugmentConfig, "augment", augment_sec),
        augment_enabled=bool(run_section.get("augment_enabled", augment_from_train)),
    )
