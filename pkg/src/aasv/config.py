"""Experiment configuration: TOML file, dotted-key overrides and stable hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli
import tomli_w

from .corpus import CorpusConfig
from .domain import DomainTrainConfig
from .encoder import TrainConfig

CONFIG_ENV = "AASV_CONFIG"


class ConfigError(ValueError):
    """Malformed config file, unknown key or bad override."""


@dataclass
class EvalConfig:
    n_pos: int = 300
    n_neg: int = 300
    wse_alpha: float = 0.5
    # "system:test_set" cells left out of the report (rendered as "-")
    exclude: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.n_pos < 1 or self.n_neg < 1:
            raise ValueError("trial counts must be >= 1")
        if not 0.0 <= self.wse_alpha <= 1.0:
            raise ValueError("wse_alpha must lie in [0, 1]")


@dataclass
class AnalysisConfig:
    """Ratio harness and severity-cluster settings."""

    ratio_pairs: list[tuple[int, int]] = field(
        default_factory=lambda: [(120, 120), (240, 120), (360, 120), (600, 120)])
    cohort_severities: tuple[float, float] = (0.9, 0.3)
    cohort_speakers: int = 20
    cohort_utts: int = 5


@dataclass
class ExperimentConfig:
    seed: int = 0
    workdir: str = "aasv-work"
    virtual: bool = False
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig)
    domain: DomainTrainConfig = field(default_factory=DomainTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        # the master seed drives every stage
        self.corpus = dataclasses.replace(self.corpus, seed=self.seed)
        self.train = dataclasses.replace(self.train, seed=self.seed)
        self.finetune = dataclasses.replace(self.finetune, seed=self.seed)
        self.domain = dataclasses.replace(self.domain, seed=self.seed)

    def to_dict(self) -> dict:
        return _plain(self)

    def section(self, name: str) -> dict:
        return _plain(getattr(self, name))


_SEED_FIELDS = {"corpus", "train", "finetune", "domain"}


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{where}: expected a table")
        return _build(tp, value, where)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where}: expected a list of {len(args)} values")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if origin is list:
        (arg,) = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return [_coerce(arg, v, where) for v in value]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls: type, data: Mapping, where: str = "") -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) in [{where or 'top level'}]: {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where or 'top level'}] {exc}") from None


def from_dict(data: Mapping) -> ExperimentConfig:
    data = {k: dict(v) if isinstance(v, Mapping) else v for k, v in data.items()}
    for name in _SEED_FIELDS:
        if isinstance(data.get(name), dict) and "seed" in data[name]:
            raise ConfigError(f"[{name}] seed is derived from the top-level seed; set `seed` instead")
    return _build(ExperimentConfig, data)


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key=value`` with a TOML value; bare words are taken as strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return path, value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {p} is not a table")
        node[path[-1]] = value
    return data


def read_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """File (explicit path, else $AASV_CONFIG, else defaults) plus overrides; overrides win."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    data = read_toml(path) if path is not None else {}
    return from_dict(apply_overrides(data, list(overrides or [])))


def dumps_toml(cfg: ExperimentConfig, include_workdir: bool = True) -> str:
    data = cfg.to_dict()
    if not include_workdir:
        data.pop("workdir")
    for name in _SEED_FIELDS:
        data[name].pop("seed")
    return tomli_w.dumps(data)


def stable_hash(*parts: Any) -> str:
    blob = json.dumps([_plain(p) for p in parts], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
