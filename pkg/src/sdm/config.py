"""key=value configuration files and overrides applied to dataclass configs."""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv_lines(lines, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_kv_lines(text.splitlines(), str(path))


def _coerce(text: str, hint, name: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _coerce(text, inner[0], name)
    if origin is tuple:
        if text.lower() in ("empty", ""):
            return ()
        parts = [p.strip() for p in text.split(",")]
        elem = args[0] if args else str
        return tuple(_coerce(p, elem, name) for p in parts)
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def apply_overrides(config, values: dict[str, str], prefix: str = ""):
    """Return a copy of dataclass ``config`` with matching ``prefix + field`` keys replaced."""
    hints = typing.get_type_hints(type(config))
    changes = {}
    for f in dataclasses.fields(config):
        key = prefix + f.name
        if key in values:
            changes[f.name] = _coerce(values[key], hints[f.name], key)
    if not changes:
        return config
    try:
        return dataclasses.replace(config, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def unknown_keys(values: dict[str, str], configs: dict[str, object]) -> list[str]:
    """Keys matching no field of any ``{prefix: config}`` pair."""
    known = {p + f.name for p, c in configs.items() for f in dataclasses.fields(c)}
    return sorted(k for k in values if k not in known)
