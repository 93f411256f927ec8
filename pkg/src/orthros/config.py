"""Flat ``key = value`` configuration files with typed parsing."""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any, Dict, Iterable, Type


def read_kv(path) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_scalar(s: str, typ) -> Any:
    s = s.strip()
    if typ is bool:
        return parse_bool(s)
    if typ is int:
        return int(s)
    if typ is float:
        return float(s)
    if s.startswith(("'", '"')) and s.endswith(s[0]) and len(s) >= 2:
        return s[1:-1]
    return s


def parse_list(s: str, typ) -> list:
    return [parse_scalar(part, typ) for part in s.split(",") if part.strip()]


def _field_type(cls, name: str):
    hints = typing.get_type_hints(cls)
    typ = hints[name]
    args = typing.get_args(typ)
    if args and type(None) in args:  # Optional[X]
        typ = next(a for a in args if a is not type(None))
    return typ


def coerce(cls: Type, raw: Dict[str, str]) -> Dict[str, Any]:
    """Convert raw strings to the field types of dataclass ``cls``; unknown keys raise."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    out = {}
    for k, v in raw.items():
        typ = _field_type(cls, k)
        out[k] = None if v.lower() in ("none", "null") else parse_scalar(v, typ)
    return out


def split_by_class(raw: Dict[str, str], classes: Iterable[Type]) -> list:
    """Route each key to the first dataclass that declares it; keys nobody declares raise."""
    classes = list(classes)
    parts = [dict() for _ in classes]
    for k, v in raw.items():
        for i, cls in enumerate(classes):
            if k in {f.name for f in dataclasses.fields(cls)}:
                parts[i][k] = v
                break
        else:
            raise ValueError(f"unknown config key {k!r}")
    return [coerce(cls, p) for cls, p in zip(classes, parts)]
