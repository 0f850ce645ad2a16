"""TOML configuration files for the command-line tools.

A config file holds up to four tables whose keys are merged into one
:class:`~actordb.bench.BenchmarkConfig`::

    [store]        # sections_total, inventory_items_per_section, history_rows_per_item, ...
    [discount]     # c, k, replenish_quantity, replenish
    [bench]        # workers, mode, epochs, epoch_seconds, seed, ...
    [durability]   # enabled (-> durability), log_path, fsync

Keys may also appear at the top level. Unknown keys are rejected.
"""

from __future__ import annotations

import sys
from dataclasses import fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bench import BenchmarkConfig
from .errors import ConfigError

TABLES = ("store", "discount", "bench", "durability")
_RENAMES = {("durability", "enabled"): "durability"}


def read_toml(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def flatten(doc: dict[str, Any]) -> dict[str, Any]:
    """Merge the known tables (and top-level keys) into BenchmarkConfig keywords."""
    known = {f.name for f in fields(BenchmarkConfig)}
    out: dict[str, Any] = {}

    def put(table: str | None, key: str, value: Any) -> None:
        name = _RENAMES.get((table, key), key)
        if name not in known:
            where = f"[{table}] " if table else ""
            raise ConfigError(f"unknown config key {where}{key!r}")
        if name in out:
            raise ConfigError(f"config key {name!r} given twice")
        out[name] = value

    for key, value in doc.items():
        if key in TABLES:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            for k, v in value.items():
                put(key, k, v)
        elif isinstance(value, dict):
            raise ConfigError(f"unknown config table [{key}]")
        else:
            put(None, key, value)
    return out


def load_config(path: str | Path | None = None, full_scale: bool = False,
                **overrides: Any) -> BenchmarkConfig:
    """Build a BenchmarkConfig from a file (optional) plus explicit overrides."""
    values = flatten(read_toml(path)) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        if full_scale:
            return BenchmarkConfig.full_scale(**values)
        return BenchmarkConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
