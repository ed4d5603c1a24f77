"""Run configuration: one merged view of scene, model, and training knobs.

Configs load from a flat dotted-key text file (``loss.lambda3 = 100``) and
can be overridden per key on the command line. The fully resolved config is
echoed into every run directory before any work starts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

from . import __version__
from .datagen import SceneConfig, validate_config
from .losses import LossConfig
from .model import ModelConfig
from .training import TrainConfig

RESOLVED_CONFIG_NAME = "config_resolved.txt"


class ConfigError(ValueError):
    """A config file or override that names a bad key or value."""


@dataclass
class RunConfig:
    """Everything a run needs: data generation, model dims, training."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        validate_config(self.scene)
        self.model.validate()
        self.train.validate()


# -- parsing -------------------------------------------------------------------


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blanks are skipped."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


def load_config_file(path: str) -> dict[str, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        return parse_config_text(f.read(), source=path)


def _coerce(key: str, raw: str, default):
    kind = type(default)
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "yes", "1"):
                return True
            if lowered in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind is tuple:
            parts = [p.strip() for p in raw.strip("()").split(",") if p.strip()]
            elem = type(default[0]) if default else str
            if elem is not str and len(parts) != len(default):
                raise ValueError(f"expected {len(default)} values, got {len(parts)}")
            return tuple(elem(p) for p in parts)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}: {exc}") from exc
    raise ConfigError(f"{key}: unsupported field type {kind.__name__}")


def _section_fields(obj) -> dict[str, object]:
    return {f.name: getattr(obj, f.name) for f in fields(obj) if f.name != "loss"}


def apply_values(config: RunConfig, values: dict[str, str]) -> RunConfig:
    """A new RunConfig with every dotted key applied. Keys live under the
    scene., model., train., and loss. namespaces."""
    scene, model, train = config.scene, config.model, config.train
    loss = train.loss
    for key, raw in values.items():
        if "." not in key:
            raise ConfigError(f"unknown config key {key!r} (expected section.field)")
        section, name = key.split(".", 1)
        target = {"scene": scene, "model": model, "train": train,
                  "loss": loss}.get(section)
        if target is None:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        current = _section_fields(target)
        if name not in current:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(key, raw, current[name])
        if section == "scene":
            scene = replace(scene, **{name: value})
        elif section == "model":
            model = replace(model, **{name: value})
        elif section == "train":
            train = replace(train, **{name: value})
        else:
            loss = replace(loss, **{name: value})
    train = replace(train, loss=loss)
    return RunConfig(scene, model, train)


def build_run_config(config_path: str | None = None,
                     overrides=()) -> RunConfig:
    """Defaults, then the config file, then ``key=value`` override strings."""
    values: dict[str, str] = {}
    if config_path:
        values.update(load_config_file(config_path))
    for item in overrides:
        values.update(parse_config_text(item, source="<override>"))
    config = apply_values(RunConfig(), values)
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return config


# -- echoing -------------------------------------------------------------------


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_lines(config: RunConfig) -> list[str]:
    lines = []
    for section, obj in (("scene", config.scene), ("model", config.model),
                         ("train", config.train), ("loss", config.train.loss)):
        for name, value in _section_fields(obj).items():
            lines.append(f"{section}.{name} = {_format_value(value)}")
    return lines


def write_resolved_config(config: RunConfig, out_dir: str,
                          extra: dict[str, str] | None = None) -> str:
    """Echo the fully resolved config (plus version and seed) into
    ``out_dir`` and return the file path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RESOLVED_CONFIG_NAME)
    lines = [f"version = protodensity-{__version__}",
             f"seed = {config.train.seed}"]
    for key in sorted(extra or {}):
        lines.append(f"{key} = {extra[key]}")
    lines.extend(resolved_lines(config))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path
