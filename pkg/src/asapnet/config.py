"""JSON run configuration.

The file is an object with up to four sections, each mapping to a dataclass::

    {
      "generator":     {...GeneratorConfig fields...},
      "discriminator": {...DiscriminatorConfig fields...},
      "train":         {...TrainConfig fields...},
      "data":          {...SynthSpec fields...}
    }

Unknown sections or keys are rejected. Omitted keys take dataclass defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from asapnet.data import SynthSpec
from asapnet.errors import ConfigurationError
from asapnet.hypernet import GeneratorConfig
from asapnet.training import DiscriminatorConfig, TrainConfig

SECTIONS = {
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "train": TrainConfig,
    "data": SynthSpec,
}


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthSpec = field(default_factory=SynthSpec)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    raw = {k: dict(v) for k, v in raw.items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
        raw.setdefault(section, {})[name] = _parse_value(value)
    return raw


def build_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {sorted(unknown)}")
    built = {}
    for name, cls in SECTIONS.items():
        values = raw.get(name, {})
        if not isinstance(values, dict):
            raise ConfigurationError(f"config section {name!r} must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(values) - known
        if bad:
            raise ConfigurationError(f"unknown key(s) in {name!r}: {sorted(bad)}")
        try:
            built[name] = cls(**values)
        except TypeError as e:
            raise ConfigurationError(f"invalid {name!r} section: {e}") from e
    return RunConfig(**built)


def config_load(path=None, overrides: list[str] | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigurationError(f"{path}: cannot read config ({e})") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON ({e})") from e
    return build_config(apply_overrides(raw, overrides or []))
