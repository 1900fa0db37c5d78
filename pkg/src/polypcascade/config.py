"""Flat ``key=value`` config files.

Blank lines and ``#`` comments are ignored.  Values are coerced to the type of
the matching dataclass field; unknown keys are an error so typos surface.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def _coerce(value: str, tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.lower() in ("", "none"):
            return None
        return _coerce(value, args[0])
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p.strip() for p in value.split(",") if p.strip()]
        return tuple(_coerce(p, args[0]) for p in parts)
    if tp is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if tp is int:
        return int(value)
    if tp is float:
        return float(value)
    return value


def apply_kv(obj, values: dict[str, str]):
    """Return a copy of dataclass ``obj`` with ``values`` coerced onto its fields."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise KeyError(f"unknown config keys for {type(obj).__name__}: {', '.join(unknown)}")
    changes = {k: _coerce(v, hints[k]) for k, v in values.items()}
    return dataclasses.replace(obj, **changes)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float) and value.is_integer():
        return str(int(value)) if abs(value) < 1e15 else repr(value)
    return str(value)


def dump_kv(obj) -> str:
    lines = [f"{f.name}={format_value(getattr(obj, f.name))}"
             for f in dataclasses.fields(obj)]
    return "\n".join(lines) + "\n"
