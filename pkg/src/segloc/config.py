"""Plain-text ``key = value`` configuration files (``#`` starts a comment)."""
from __future__ import annotations

import dataclasses
import typing
from typing import Any, Dict, Mapping


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        out[key] = value
    return out


def read_config(path) -> Dict[str, str]:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def _coerce(value: str, tp) -> Any:
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.lower() in ("none", ""):
            return None
        return _coerce(value, args[0])
    if origin in (tuple, typing.Tuple):
        args = typing.get_args(tp)
        parts = [p.strip() for p in value.strip("()").split(",") if p.strip()]
        inner = args[0] if args else str
        return tuple(_coerce(p, inner) for p in parts)
    if tp is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if tp is int:
        return int(value)
    if tp is float:
        return float(value)
    return value


def apply_config(obj, values: Mapping[str, str], prefix: str = ""):
    """Copy of dataclass ``obj`` with matching keys replaced.

    Nested dataclass fields are addressed as ``outer.inner``. Returns the new
    object and the set of keys used.
    """
    hints = typing.get_type_hints(type(obj))
    changes = {}
    used = set()
    for f in dataclasses.fields(obj):
        key = prefix + f.name
        cur = getattr(obj, f.name)
        if dataclasses.is_dataclass(cur):
            sub, u = apply_config(cur, values, key + ".")
            if u:
                changes[f.name] = sub
                used |= u
        elif key in values:
            try:
                changes[f.name] = _coerce(values[key], hints[f.name])
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{key}: {e}") from None
            used.add(key)
    return dataclasses.replace(obj, **changes), used


def flatten(obj, prefix: str = "") -> Dict[str, str]:
    """Dataclass to ``key -> text`` pairs, for echoing into manifests."""
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, prefix + f.name + "."))
        elif isinstance(v, tuple):
            out[prefix + f.name] = ", ".join(str(x) for x in v)
        else:
            out[prefix + f.name] = str(v)
    return out
