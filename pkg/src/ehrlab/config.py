"""YAML experiment files: one section per component, every key checked against its dataclass."""

from __future__ import annotations

import dataclasses
import datetime as dt
import os
from pathlib import Path
from typing import Any, Mapping

import yaml

from .ablation import AblationPlan, RunSettings, materialize, reference_plan, resolve_task
from .cohort import TaskDefinition, load_task
from .pipeline import RepresentationConfig
from .synth import GeneratorSpec, SignalPlant

SECTIONS = ("generator", "representation", "model", "pretrain", "finetune", "run", "plan", "tasks")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


def load_config(path: str | os.PathLike | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}; expected {list(SECTIONS)}")
    data["_base"] = str(Path(path).resolve().parent)
    return data


def _section(config: Mapping, name: str) -> dict:
    value = config.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return dict(value)


def _check_keys(values: Mapping, cls, what: str, exclude: set[str] = frozenset()) -> None:
    known = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys {sorted(unknown)}")


def _as_datetime(value) -> dt.datetime:
    if isinstance(value, dt.datetime):
        return value
    if isinstance(value, dt.date):
        return dt.datetime.combine(value, dt.time())
    return dt.datetime.fromisoformat(str(value))


def _as_date(value) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    return dt.date.fromisoformat(str(value))


def _plant(data: Mapping) -> SignalPlant:
    _check_keys(data, SignalPlant, "plant")
    kw = dict(data)
    if "precursors" in kw:
        kw["precursors"] = tuple(kw["precursors"])
    if "lag_days" in kw:
        kw["lag_days"] = tuple(float(x) for x in kw["lag_days"])
    if "windows" in kw:
        kw["windows"] = tuple((_as_datetime(a), _as_datetime(b)) for a, b in kw["windows"])
    return SignalPlant(**kw)


def generator_spec(config: Mapping, seed: int | None = None) -> GeneratorSpec:
    values = _section(config, "generator")
    _check_keys(values, GeneratorSpec, "generator")
    for key in ("start", "end", "birth_start", "birth_end"):
        if key in values:
            values[key] = _as_date(values[key])
    values["plants"] = tuple(_plant(p) for p in values.get("plants") or ())
    if seed is not None:
        values["seed"] = seed
    try:
        spec = GeneratorSpec(**values)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"generator: {exc}") from exc
    return spec


def representation_config(config: Mapping) -> RepresentationConfig:
    values = _section(config, "representation")
    _check_keys(values, RepresentationConfig, "representation")
    if "truncation_lengths" in values:
        values["truncation_lengths"] = tuple((str(k), int(v)) for k, v in dict(values["truncation_lengths"]).items())
    try:
        return RepresentationConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"representation: {exc}") from exc


def run_settings(config: Mapping, seed: int | None = None) -> RunSettings:
    """Sizes and schedules for training, with the searched fields left to the plan."""
    defaults = RunSettings()
    kwargs: dict[str, Any] = {}
    for name in ("model", "representation", "pretrain", "finetune"):
        values = _section(config, name)
        if name == "representation" and "truncation_lengths" in values:
            values["truncation_lengths"] = tuple((str(k), int(v))
                                                 for k, v in dict(values["truncation_lengths"]).items())
        kwargs[name] = {**getattr(defaults, name), **values}
    run = _section(config, "run")
    _check_keys(run, RunSettings, "run", exclude={"model", "representation", "pretrain", "finetune"})
    kwargs.update(run)
    if seed is not None:
        kwargs["seed"] = seed
    try:
        settings = RunSettings(**kwargs)
        materialize({}, settings, settings.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"run settings: {exc}") from exc
    return settings


def plan(config: Mapping) -> AblationPlan:
    value = config.get("plan")
    try:
        if value is None:
            return reference_plan()
        if isinstance(value, str):
            path = Path(value)
            if not path.is_absolute() and "_base" in config:
                path = Path(config["_base"]) / path
            return AblationPlan.load(path)
        return AblationPlan.from_mapping(value)
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise ConfigError(f"plan: {exc}") from exc


def task_definitions(config: Mapping, names=None) -> list[TaskDefinition]:
    """Tasks by condition name, by YAML path or given inline."""
    items = names if names else (config.get("tasks") or [])
    out = []
    for item in items:
        try:
            if isinstance(item, Mapping):
                out.append(TaskDefinition.from_mapping(item))
            elif str(item).endswith((".yaml", ".yml")):
                path = Path(item)
                if not path.is_absolute() and "_base" in config and not path.exists():
                    path = Path(config["_base"]) / path
                out.append(load_task(path))
            else:
                out.append(resolve_task(item))
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise ConfigError(f"task {item!r}: {exc}") from exc
    return out
