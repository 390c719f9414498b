"""Sectioned key-value experiment configuration.

Files use INI syntax. Every section and key must be known; anything else is
rejected with a message listing the accepted names. The canonical text form
(sorted sections and keys, normalized values) is what gets hashed into
reports.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    choices: tuple | None = None


SCHEMA: dict[str, dict[str, Key]] = {
    "run": {
        "seed": Key(int, 0),
        "workers": Key(int, 1),
    },
    "data": {
        "source": Key(str, "synthetic-faces", ("synthetic-faces", "synthetic-patches", "directory")),
        "root": Key(str, ""),
        "size": Key(int, 32),
        "count": Key(int, 64),
        "crop": Key(str, "center", ("center", "random-patch")),
        "seed": Key(int, 0),
        "channels": Key(int, 3, (1, 3)),
    },
    "network": {
        "kind": Key(str, "dip", ("dip", "siren")),
        "channels": Key(_int_list, (32, 64, 64)),
        "skip_channels": Key(_int_list, (4, 4, 4)),
        "latent_channels": Key(int, 16),
        "fourier_features": Key(int, 64),
        "fourier_scale": Key(float, 10.0),
        "siren_layers": Key(int, 4),
        "siren_width": Key(int, 128),
        "siren_omega0": Key(float, 30.0),
    },
    "meta": {
        "outer_steps": Key(int, 2000),
        "inner_steps": Key(int, 20),
        "test_steps": Key(int, 50),
        "batch_size": Key(int, 1),
        "sigma": Key(float, 25.0),
        "outer_lr": Key(float, 1e-4),
        "lr_outer_lr": Key(_opt_float, 1e-2),
        "init_lr": Key(float, 5e-4),
        "momentum": Key(float, 0.9),
        "learn_lrs": Key(_bool, True),
        "first_order": Key(_bool, False),
        "eval_every": Key(int, 100),
        "val_tasks": Key(int, 8),
        "checkpoint_every": Key(int, 500),
    },
    "problem": {
        "kind": Key(str, "denoise", ("denoise", "cs", "cpr")),
        "sigma": Key(float, 25.0),
        "ratio": Key(float, 0.25),
    },
    "methods": {
        "names": Key(_str_list, ("metadip", "dip50")),
        "checkpoint": Key(str, ""),
        "siren_checkpoint": Key(str, ""),
        "steps": Key(int, 0),
    },
    "admm": {
        "denoiser": Key(str, "tv"),
        "strength": Key(float, 15.0),
        "rho": Key(float, 1.0),
        "iterations": Key(int, 50),
        "grid_strength": Key(_float_list, (5.0, 15.0, 25.0)),
        "grid_rho": Key(_float_list, (0.1, 1.0, 10.0)),
        "grid_iterations": Key(_int_list, (25, 50, 100)),
        "validation_tasks": Key(int, 2),
    },
    "benchmark": {
        "problems": Key(_str_list, ("denoise",)),
        "tasks": Key(int, 4),
    },
    "convergence": {
        "max_steps": Key(int, 500),
        "task": Key(int, 0),
    },
}


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config:
    """Parsed configuration: ``cfg["meta"]["outer_steps"]``."""

    def __init__(self, values: dict[str, dict[str, object]], source: str | None = None):
        self.values = values
        self.source = source

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def canonical_text(self) -> str:
        lines = []
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                lines.append(f"{key} = {_render(self.values[section][key])}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def set(self, section: str, key: str, raw: str) -> None:
        self.values[section][key] = _parse_value(section, key, raw)


def _parse_value(section: str, key: str, raw: str):
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]; accepted sections: {', '.join(sorted(SCHEMA))}")
    spec = SCHEMA[section].get(key)
    if spec is None:
        raise ConfigError(
            f"unknown key {key!r} in [{section}]; accepted keys: {', '.join(sorted(SCHEMA[section]))}"
        )
    try:
        value = spec.parse(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} ({exc})") from None
    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(f"[{section}] {key} = {raw!r}; accepted values: {', '.join(map(str, spec.choices))}")
    return value


def default_config() -> Config:
    return Config({s: {k: spec.default for k, spec in keys.items()} for s, keys in SCHEMA.items()})


def parse_config(text: str, source: str | None = None) -> Config:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = default_config()
    cfg.source = source
    for section in parser.sections():
        for key, raw in parser.items(section):
            cfg.set(section, key, raw)
    return cfg


def load_config(path=None) -> Config:
    if path is None:
        return default_config()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), source=str(path))
