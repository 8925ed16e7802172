"""Flat ``key = value`` configuration files.

Lines starting with ``#`` (and trailing ``# ...``) are comments. Unknown keys
are errors: a typo silently falling back to a default would invalidate an
ablation.
"""
from __future__ import annotations

import dataclasses
from typing import Any, Mapping


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key)
        pairs[key] = value
    return pairs


def _convert(value: str, default: Any, key: str):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(float(v) for v in value.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value {value!r} for key {key!r}", key) from None
    return value


def apply_overrides(obj, values: Mapping[str, Any]):
    """Return a copy of dataclass `obj` with string/typed values applied by key."""
    fields = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in values.items():
        if key not in fields or key.startswith("_"):
            raise ConfigError(f"unknown config key {key!r}", key)
        default = getattr(obj, key)
        changes[key] = _convert(value, default, key) if isinstance(value, str) else value
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), getattr(exc, "key", None)) from None


def load(cls, text: str):
    return apply_overrides(cls(), parse_pairs(text))


def dump(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        if f.name.startswith("_"):
            continue
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = ", ".join(repr(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
