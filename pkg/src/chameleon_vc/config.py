"""Plain-text run configuration: one ``section.key = value`` per line.

Blank lines and ``#`` comments are ignored. Every key must be known; a typo
is an error rather than a silently ignored setting.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .trainer import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _defaults():
    out = {
        "data.speakers": 8,
        "data.utts": 5,
        "data.seed": 7,
        "frontend.voicing_threshold": 0.5,
        "eval.probe_reg": 1.0,
        "eval.min_run": 3,
    }
    for prefix, cls in (("model", ModelConfig), ("train", TrainConfig)):
        for f in fields(cls):
            out[f"{prefix}.{f.name}"] = f.default
    return out


DEFAULTS = _defaults()


def _parse_value(key, raw):
    default = DEFAULTS[key]
    try:
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, bool):
            if raw not in ("true", "false", "True", "False"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


def parse_text(text, source="<config>"):
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'section.key = value'")
        key, raw = (x.strip() for x in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def load(path=None, overrides=None):
    """Defaults, then the file, then explicit overrides (flags)."""
    values = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(parse_text(path.read_text(encoding="utf-8"), str(path)))
    for key, v in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        if v is not None:
            values[key] = _parse_value(key, v) if isinstance(v, str) else v
    return values


def section(values, name):
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}


def model_config(values):
    return ModelConfig(**section(values, "model"))


def train_config(values):
    return TrainConfig(**section(values, "train"))


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    return repr(v) if isinstance(v, float) else str(v)


def dump(values):
    """Resolved configuration, sorted, in the same ``key = value`` syntax."""
    return "".join(f"{key} = {_fmt(values[key])}\n" for key in sorted(values))


def section_values(values, *names):
    """Subset of ``values`` whose keys fall in the given sections (full keys kept)."""
    return {k: v for k, v in values.items() if k.split(".", 1)[0] in names}
