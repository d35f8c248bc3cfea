"""Flat ``key = value`` config files (a TOML subset: scalars, strings, lists)."""

from __future__ import annotations

import ast
import dataclasses
import re
from pathlib import Path


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(mapping) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in mapping.items())


def loads(text) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key.replace("_", "").replace("-", "").isalnum():
            raise ValueError(f"line {lineno}: bad key {key!r}")
        if not value.startswith('"'):
            value = re.sub(r"\btrue\b", "True", re.sub(r"\bfalse\b", "False", value))
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError) as exc:
            raise ValueError(f"line {lineno}: cannot parse value {value!r}") from exc
    return out


def write_config(path, obj):
    mapping = dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else dict(obj)
    Path(path).write_text(dumps(mapping), encoding="utf-8")


def read_config(path) -> dict:
    return loads(Path(path).read_text(encoding="utf-8"))


def from_mapping(cls, mapping):
    """Build dataclass ``cls`` from ``mapping``, ignoring unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in mapping.items() if k in names}
    return cls(**kw)
