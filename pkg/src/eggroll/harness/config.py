"""Flat ``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored.  Every experiment
declares its keys with a type and default; unknown keys are rejected.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

__all__ = ["ConfigError", "parse_config", "load_config", "resolve"]


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def _convert(key: str, value: str, kind: type) -> Any:
    try:
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is tuple:
            return tuple(int(v) for v in value.replace(",", " ").split())
        if kind is int:
            return int(value, 0)
        return kind(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {value!r} as {kind.__name__}") from None


def resolve(schema: dict[str, tuple[type, Any]], raw: dict[str, str], overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Typed settings: schema defaults, then file values, then overrides."""
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}; valid keys: {', '.join(sorted(schema))}")
    out = {k: default for k, (_, default) in schema.items()}
    for k, v in raw.items():
        out[k] = _convert(k, v, schema[k][0])
    for k, v in (overrides or {}).items():
        if v is not None:
            out[k] = v
    return out
