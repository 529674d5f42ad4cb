"""Hierarchical run configuration.

One YAML file with a section per subsystem; every field has a default, so
an empty file is a valid config. Unknown sections or keys are rejected.
Environment variables override file values as LSE_<SECTION>_<KEY>
(e.g. ``LSE_TRAIN_LR=1e-4``). The SHA-256 fingerprint of the resolved
config is embedded in every artifact the run produces.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .checkpoint import fingerprint_of
from .data import CorpusConfig
from .denoiser import DenoiserConfig
from .enhance import EnhanceConfig
from .errors import ConfigError
from .frontend import FrameConfig, MelConfig
from .training import TrainConfig
from .vae import VAEConfig, VAETrainConfig


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    n_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


_SECTIONS = {
    "frame": FrameConfig,
    "mel": MelConfig,
    "corpus": CorpusConfig,
    "vae": VAEConfig,
    "vae_train": VAETrainConfig,
    "schedule": ScheduleConfig,
    "denoiser": DenoiserConfig,
    "train": TrainConfig,
    "enhance": EnhanceConfig,
}


@dataclass
class AppConfig:
    frame: FrameConfig = field(default_factory=FrameConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    vae_train: VAETrainConfig = field(default_factory=VAETrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def fingerprint(self) -> str:
        d = self.to_dict()
        for section in d.values():  # tuples/lists normalize the same in JSON
            for k, v in section.items():
                if isinstance(v, tuple):
                    section[k] = list(v)
        return fingerprint_of(d)


def _coerce(value, default):
    """Coerce a raw YAML/env value to the type of the field default."""
    if value is None:
        return None
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [p for p in value.split(",") if p.strip()]
        return tuple(int(v) for v in value)
    if isinstance(default, str):
        return str(value)
    if default is None:
        # optional field: env strings "none"/"null" clear it; numbers pass through
        if isinstance(value, str):
            s = value.strip().lower()
            if s in ("none", "null", ""):
                return None
            try:
                return float(s) if ("." in s or "e" in s) else int(s)
            except ValueError:
                return value
        return value
    return value


def _build_section(cls, raw: dict, section: str):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}; "
            f"valid keys: {', '.join(sorted(known))}"
        )
    kwargs = {}
    for f in fields(cls):
        if f.name in raw:
            kwargs[f.name] = _coerce(raw[f.name], getattr(defaults, f.name))
    return replace(defaults, **kwargs) if kwargs else defaults


def load_config(path=None, env: dict | None = None) -> AppConfig:
    """Resolve a config from (optional) YAML file plus environment
    overrides. Raises ConfigError on unknown sections or keys."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root must be a mapping, got {type(loaded).__name__}")
        raw = loaded

    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(
            f"unknown config section(s): {', '.join(sorted(unknown))}; "
            f"valid sections: {', '.join(sorted(_SECTIONS))}"
        )
    for name, section in raw.items():
        if section is not None and not isinstance(section, dict):
            raise ConfigError(f"section [{name}] must be a mapping")

    env = dict(os.environ if env is None else env)
    for key, val in env.items():
        if not key.startswith("LSE_"):
            continue
        rest = key[len("LSE_"):]
        matched = False
        # longest prefix first so VAE_TRAIN_* resolves to vae_train, not vae
        for section in sorted(_SECTIONS, key=len, reverse=True):
            prefix = section.upper() + "_"
            if rest.startswith(prefix):
                field_name = rest[len(prefix):].lower()
                known = {f.name for f in fields(_SECTIONS[section])}
                if field_name not in known:
                    raise ConfigError(
                        f"environment override {key} names unknown key "
                        f"{field_name!r} in [{section}]"
                    )
                raw.setdefault(section, {})
                raw[section] = dict(raw[section] or {})
                raw[section][field_name] = val
                matched = True
                break
        if not matched:
            raise ConfigError(f"environment override {key} matches no config section")

    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_section(cls, dict(raw.get(name) or {}), name)
    return AppConfig(**sections)
