"""Flat ``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored. Keys may use dashes
or underscores; values are kept as strings and typed by the consumer.
"""
from __future__ import annotations

from pathlib import Path


class ConfigFileError(ValueError):
    pass


def parse_config_text(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigFileError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        if key in out:
            raise ConfigFileError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config file {path}: {exc.strerror}") from exc
    return parse_config_text(text, str(path))


def format_config(mapping):
    return "".join(f"{k} = {v}\n" for k, v in sorted(mapping.items()))
