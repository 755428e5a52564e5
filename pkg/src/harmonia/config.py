"""Run-configuration assembly shared by the CLI and the job service.

A run configuration travels as a plain JSON payload (nested dicts of
scalars) so it can live in config files, HTTP override fields, and
run.json snapshots. This module folds payload layers together with a
fixed precedence (defaults, then config file, then explicit overrides)
and materializes the result into a validated HarmonizeConfig.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Mapping, Optional

from .errors import ConfigError
from .evaluate import DecisionConfig
from .harmonize import HarmonizeConfig
from .preserve import PreserveConfig
from .refine import RefineConfig
from .diffusion import SamplerConfig

_SECTIONS = {
    "sampler": SamplerConfig,
    "refine": RefineConfig,
    "preserve": PreserveConfig,
    "decisions": DecisionConfig,
}


def deep_merge(base: Mapping[str, Any],
               override: Mapping[str, Any]) -> dict[str, Any]:
    """Merge nested payloads; override wins, dicts merge recursively."""
    merged: dict[str, Any] = {k: v for k, v in base.items()}
    for key, value in override.items():
        if (key in merged and isinstance(merged[key], Mapping)
                and isinstance(value, Mapping)):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def merge_layers(*layers: Optional[Mapping[str, Any]]) -> dict[str, Any]:
    """Fold payload layers left to right; later layers win. None skipped."""
    merged: dict[str, Any] = {}
    for layer in layers:
        if layer:
            merged = deep_merge(merged, layer)
    return merged


def _build_section(name: str, cls, payload: Mapping[str, Any]):
    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - field_names)
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {unknown}")
    kwargs = dict(payload)
    if name == "preserve" and kwargs.get("self_attention_steps") is not None:
        kwargs["self_attention_steps"] = set(kwargs["self_attention_steps"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {name} config: {exc}") from exc


def harmonize_config_from_payload(
        payload: Optional[Mapping[str, Any]] = None) -> HarmonizeConfig:
    """Materialize a JSON payload into a validated HarmonizeConfig.

    Missing keys take their defaults; unknown keys are rejected so typos
    fail loudly instead of silently running with defaults.

    Raises:
        ConfigError: unknown keys, wrong types, or values a section's
            own validation rejects.
    """
    payload = dict(payload or {})
    if not isinstance(payload, dict):
        raise ConfigError("config payload must be a JSON object")
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = payload.pop(name, None)
        if section is None:
            continue
        if not isinstance(section, Mapping):
            raise ConfigError(f"config section {name!r} must be an object")
        kwargs[name] = _build_section(name, cls, section)

    scalar_names = {f.name for f in dataclasses.fields(HarmonizeConfig)
                    } - set(_SECTIONS)
    unknown = sorted(set(payload) - scalar_names)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    for key, value in payload.items():
        if key == "snapshot_steps" and value is not None:
            value = tuple(int(v) for v in value)
        kwargs[key] = value
    try:
        return HarmonizeConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a JSON config file into a payload dict.

    Raises:
        ConfigError: unreadable file, invalid JSON, or a non-object root.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config root in {path} must be a JSON object")
    return payload


def resolve_config(file_path: Optional[str | Path] = None,
                   overrides: Optional[Mapping[str, Any]] = None
                   ) -> HarmonizeConfig:
    """defaults < config file < explicit overrides, materialized."""
    layers = [load_config_file(file_path) if file_path else None, overrides]
    return harmonize_config_from_payload(merge_layers(*layers))
