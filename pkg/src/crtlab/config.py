"""Flat dotted-key config files and their mapping onto nested dataclasses.

File format (version 1)::

    # comment
    version = 1
    image_size = 32
    crt.enabled = true
    quantizer.fsq_levels = [8, 8, 4]

Values are parsed as JSON where possible (numbers, booleans, lists, quoted
strings) and fall back to bare strings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path
from typing import Any, Mapping

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def format_value(value: Any) -> str:
    if isinstance(value, tuple):
        value = list(value)
    if isinstance(value, str):
        return value
    return json.dumps(value)


def parse_config_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = parse_value(value)
    version = out.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    return out


def read_config_file(path: str | Path) -> dict[str, Any]:
    return parse_config_text(Path(path).read_text())


def parse_overrides(pairs: list[str] | None) -> dict[str, Any]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def flatten(obj: Any, prefix: str = "") -> dict[str, Any]:
    """Dataclass (or dict) -> ``{"a.b": value}``."""
    if dataclasses.is_dataclass(obj):
        items = ((f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj))
    elif isinstance(obj, Mapping):
        items = obj.items()
    else:
        return {prefix: obj}
    out = {}
    for k, v in items:
        key = f"{prefix}.{k}" if prefix else k
        if dataclasses.is_dataclass(v) or isinstance(v, Mapping):
            out.update(flatten(v, key))
        else:
            out[key] = v
    return out


def dump_config_text(obj: Any) -> str:
    lines = [f"version = {CONFIG_VERSION}"]
    lines += [f"{k} = {format_value(v)}" for k, v in sorted(flatten(obj).items())]
    return "\n".join(lines) + "\n"


def _coerce(value: Any, annotation: Any, key: str) -> Any:
    origin = typing.get_origin(annotation)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], key)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected int, got {value!r}")
        return int(value)
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {value!r}")
        return float(value)
    if annotation is str:
        return str(value)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        inner = typing.get_args(annotation)[0]
        return tuple(_coerce(v, inner, key) for v in value)
    return value


def apply_overrides(obj: Any, values: Mapping[str, Any]) -> Any:
    """Return a copy of dataclass ``obj`` with dotted-key ``values`` applied."""
    nested: dict[str, dict[str, Any]] = {}
    direct: dict[str, Any] = {}
    aliases = getattr(type(obj), "ALIASES", {})
    for key, value in values.items():
        head, _, rest = key.partition(".")
        head = aliases.get(head, head)
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            direct[head] = value
    hints = typing.get_type_hints(type(obj))
    fields = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for name, value in direct.items():
        if name not in fields:
            raise ConfigError(f"unknown config key {name!r} for {type(obj).__name__}")
        if dataclasses.is_dataclass(getattr(obj, name)):
            raise ConfigError(f"{name} is a section; set {name}.<field>")
        changes[name] = _coerce(value, hints[name], name)
    for name, sub in nested.items():
        if name not in fields or not dataclasses.is_dataclass(getattr(obj, name)):
            raise ConfigError(f"unknown config section {name!r} for {type(obj).__name__}")
        try:
            changes[name] = apply_overrides(getattr(obj, name), sub)
        except ConfigError as e:
            raise ConfigError(f"{name}.{e}") from None
    return dataclasses.replace(obj, **changes)


def config_hash(obj: Any) -> str:
    payload = json.dumps(flatten(obj), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
