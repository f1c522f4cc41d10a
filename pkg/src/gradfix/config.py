"""Experiment configuration: sectioned ``key = value`` files plus overrides.

Sections map onto dataclasses::

    [world]      WorldConfig
    [model]      ModelSpec
    [pretrain]   TrainConfig
    [finetune]   TrainConfig
    [fewshot]    TrainConfig
    [experiment] budgets, alphas, strategies, ...

Missing sections and keys keep their defaults; unknown ones are errors.
Lists are comma separated.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace

from .datasets import WorldConfig
from .errors import ConfigError
from .model import ModelSpec, TrainConfig
from .selection import HEURISTICS
from .transport import DEFAULT_ALPHA_GRID, MASK_STRATEGIES

__all__ = [
    "ExperimentSettings",
    "ExperimentConfig",
    "SECTIONS",
    "load_config",
    "parse_config",
    "apply_overrides",
    "default_pretrain",
    "default_finetune",
    "default_fewshot",
]


def default_pretrain() -> TrainConfig:
    return TrainConfig(optimizer="adamw", learning_rate=1e-2, steps=500, batch_size=64)


def default_finetune() -> TrainConfig:
    return TrainConfig(optimizer="adamw", learning_rate=1e-3, steps=100, batch_size=32, weight_decay=0.1)


def default_fewshot() -> TrainConfig:
    # a single full-batch step on D_s at the fine-tuning learning rate
    return TrainConfig(optimizer="adamw", learning_rate=1e-3, steps=1, batch_size=1 << 30, weight_decay=0.1)


@dataclass(frozen=True)
class ExperimentSettings:
    budgets: tuple[int, ...] = (1, 2, 5, 10, 20, 50)
    alphas: tuple[float, ...] = DEFAULT_ALPHA_GRID
    strategies: tuple[str, ...] = MASK_STRATEGIES
    aggregations: tuple[str, ...] = ("majority", "mean")
    heuristics: tuple[str, ...] = HEURISTICS
    seeds: tuple[int, ...] = tuple(range(10))
    zero_tol: float = 0.0
    output_dir: str = "gradfix-out"
    save_checkpoints: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("experiment.seeds must be non-empty")
        if not self.budgets or any(b < 1 for b in self.budgets):
            raise ConfigError("experiment.budgets must be non-empty integers >= 1")
        if not self.alphas or any(not (0 < a <= 1) for a in self.alphas):
            raise ConfigError("experiment.alphas must lie in (0, 1]")
        bad = set(self.strategies) - set(MASK_STRATEGIES)
        bad |= set(self.aggregations) - {"majority", "mean"}
        bad |= set(self.heuristics) - set(HEURISTICS)
        if bad:
            raise ConfigError(f"unknown experiment options: {sorted(bad)}")
        if not (math.isfinite(self.zero_tol) and self.zero_tol >= 0):
            raise ConfigError("experiment.zero_tol must be finite and >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelSpec = field(default_factory=lambda: ModelSpec(input_dim=16))
    pretrain: TrainConfig = field(default_factory=default_pretrain)
    finetune: TrainConfig = field(default_factory=default_finetune)
    fewshot: TrainConfig = field(default_factory=default_fewshot)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def __post_init__(self):
        if self.model.input_dim != self.world.input_dim:
            raise ConfigError(f"model.input_dim={self.model.input_dim} != world.input_dim={self.world.input_dim}")
        if self.model.num_classes != self.world.num_classes:
            raise ConfigError(f"model.num_classes={self.model.num_classes} != world classes={self.world.num_classes}")

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_ini(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in values.items():
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, world=replace(self.world, seed=int(seed)))


SECTIONS = ("world", "model", "pretrain", "finetune", "fewshot", "experiment")


def _section_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _format(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _coerce(raw: str, default, where: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            return _BOOL[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            proto = default[0] if default else ""
            if isinstance(proto, bool) or isinstance(proto, str):
                return tuple(items)
            cast = int if isinstance(proto, int) else float
            return tuple(cast(t) for t in items)
        return text
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from exc


def _build_section(cls_default, values: dict, section: str):
    known = {f.name: f for f in fields(cls_default)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        kwargs[key] = _coerce(raw, getattr(cls_default, key), f"{section}.{key}")
    try:
        return replace(cls_default, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _assemble(sections: dict[str, dict[str, str]]) -> ExperimentConfig:
    unknown = set(sections) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    base = ExperimentConfig()
    parts = {name: _build_section(getattr(base, name), sections.get(name, {}), name) for name in SECTIONS}
    try:
        return ExperimentConfig(**parts)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _parse_overrides(overrides) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in overrides or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        out.setdefault(section, {})[name] = value
    return out


def parse_config(text: str, overrides=()) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    sections = {s: dict(parser.items(s)) for s in parser.sections()}
    for s, kv in _parse_overrides(overrides).items():
        sections.setdefault(s, {}).update(kv)
    return _assemble(sections)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a config file (or defaults when ``path`` is None) and apply
    ``section.key=value`` overrides on top."""
    if path is None:
        return parse_config("", overrides)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    return parse_config(cfg.to_ini(), overrides)
