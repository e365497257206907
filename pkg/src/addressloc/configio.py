"""Plain-text ``key=value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


def read_kv_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def write_kv_file(values: Mapping[str, Any], path: str | Path) -> None:
    lines = [f"{k}={_format(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(value: Any, typ: Any, key: str) -> Any:
    if not isinstance(value, str):
        return value
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if value.lower() in ("none", "null", ""):
            return None
        typ = args[0]
    if typ is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: not a boolean: {value!r}")
    try:
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return value


def build_config(cls, *layers: Mapping[str, Any] | None):
    """Instantiate dataclass ``cls`` from layered overrides; later layers win."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    merged: dict[str, Any] = {}
    for layer in layers:
        if not layer:
            continue
        for key, value in layer.items():
            if value is None:
                continue
            if key not in names:
                raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
            merged[key] = _coerce(value, hints[key], key)
    return cls(**merged)
