"""Experiment configuration: JSON file plus ``section.key=value`` overrides."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .corpus import SyntheticCorpusSpec
from .training import TrainConfig

SECTIONS = {"backbone": BackboneConfig, "corpus": SyntheticCorpusSpec, "train": TrainConfig}
SCALARS = ("holdout_per_class", "holdout_seed", "eps")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    corpus: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    holdout_per_class: int = 500
    holdout_seed: int | None = None  # None: corpus.seed + 1000
    eps: float = 1e-3

    @property
    def resolved_holdout_seed(self) -> int:
        return self.corpus.seed + 1000 if self.holdout_seed is None else self.holdout_seed

    def holdout_spec(self) -> SyntheticCorpusSpec:
        return dataclasses.replace(self.corpus, n_per_class=self.holdout_per_class,
                                   seed=self.resolved_holdout_seed)

    def to_dict(self) -> dict:
        return {"backbone": self.backbone.to_dict(), "corpus": self.corpus.to_dict(),
                "train": self.train.to_dict(), "holdout_per_class": self.holdout_per_class,
                "holdout_seed": self.holdout_seed, "eps": self.eps}

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = set(raw) - set(SECTIONS) - set(SCALARS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, typ in SECTIONS.items():
            section = raw.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(typ)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kwargs[name] = typ(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from exc
        for key in SCALARS:
            if key in raw:
                kwargs[key] = raw[key]
        return cls(**kwargs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` strings to a raw config dict; values parse as JSON when possible."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a scalar")
        node[parts[-1]] = _parse_value(value)
    return out


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"{p}: no such config file") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be an object")
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides or []))
