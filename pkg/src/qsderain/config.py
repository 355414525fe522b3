"""Flat ``key = value`` configuration files.

One setting per line, ``#`` starts a comment, blank lines are ignored.  Keys
use underscores (dashes are accepted and normalised).  Values are typed by
the default they override: booleans accept ``true/false/yes/no/1/0`` and
sequences are comma separated.
"""
from __future__ import annotations

import logging
from pathlib import Path

log = logging.getLogger(__name__)

__all__ = ["ConfigError", "read_kv", "coerce", "merge_settings", "write_kv"]


class ConfigError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{n}: empty key")
        out[key.replace("-", "_")] = value
    return out


def coerce(value, like):
    """Convert the string ``value`` to the type of ``like``."""
    if not isinstance(value, str):
        return value
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, (tuple, list)):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        elem = like[0] if like else ""
        return tuple(coerce(p, elem) for p in parts)
    return value


def merge_settings(defaults: dict, config_path=None, overrides: dict | None = None,
                   strict: bool = False) -> dict:
    """``defaults`` < config file < ``overrides`` (entries that are ``None`` are ignored).

    Config keys the command does not know are skipped with a warning, so one
    file can serve several subcommands; ``strict=True`` rejects them instead.
    """
    merged = dict(defaults)
    if config_path is not None:
        for k, v in read_kv(config_path).items():
            if k not in defaults:
                if strict:
                    raise ConfigError(f"unknown config key {k!r}")
                log.warning("ignoring unknown config key %r", k)
                continue
            try:
                merged[k] = coerce(v, defaults[k]) if defaults[k] is not None else v
            except ValueError as exc:
                raise ConfigError(f"bad value for {k!r}: {exc}") from exc
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = coerce(v, defaults.get(k)) if defaults.get(k) is not None else v
    return merged


def write_kv(path, settings: dict) -> None:
    lines = []
    for k in sorted(settings):
        v = settings[k]
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")
