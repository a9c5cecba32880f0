"""Strict dict <-> dataclass conversion for config documents."""

from __future__ import annotations

import dataclasses
import typing

from .errors import ConfigError


def _key(f: dataclasses.Field) -> str:
    return f.metadata.get("key", f.name)


def to_plain(obj):
    """Dataclass -> JSON-ready dict (tuples become lists, aliases applied)."""
    if dataclasses.is_dataclass(obj):
        return {_key(f): to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_plain(v) for v in obj]
    return obj


def _check_scalar(tp, value, path: str):
    if tp is bool:
        ok = isinstance(value, bool)
    elif tp is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tp is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif tp is str:
        ok = isinstance(value, str)
    else:
        return value
    if not ok:
        raise ConfigError(f"{path}: expected {tp.__name__}, got {type(value).__name__} {value!r}")
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build ``cls`` from ``data``, rejecting unknown keys with their dotted path."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {_key(f): f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key{'s' if len(unknown) > 1 else ''} "
                          + ", ".join(f"'{path}{k}'" for k in unknown))
    kwargs = {}
    for key, value in data.items():
        f = fields[key]
        tp = hints[f.name]
        where = f"{path}{key}"
        if dataclasses.is_dataclass(tp):
            value = from_dict(tp, value, where + ".")
        elif isinstance(value, list):
            value = tuple(value)
        else:
            value = _check_scalar(tp, value, where)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path.rstrip('.') or '<root>'}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{path.rstrip('.') or '<root>'}: {exc}") from exc
