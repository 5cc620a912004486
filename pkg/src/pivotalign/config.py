"""Plain-text experiment configuration.

A config file holds `key = value` lines; blank lines and `#` comments are
ignored. Dotted keys address dataclass fields:

    corpus.*          -> CorpusSpec
    model.*           -> ModelConfig (vocab_size excluded; the corpus fixes it)
    train.*           -> TrainConfig
    train.contrast.*  -> ContrastConfig
    finetune.*        -> FinetuneConfig
    eval.*            -> DecodeConfig
    seed              -> experiment seed (corpus generation; also the default
                         for train.seed and finetune.seed unless those are set)

The PIVOT_ALIGN_SEED environment variable, when set, overrides every seed,
including explicitly configured ones. Values are coerced to the annotated
field type; unknown keys, duplicate keys and malformed lines are rejected.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, replace
from pathlib import Path

from .data import CorpusSpec
from .errors import ConfigError
from .evaluation import DecodeConfig
from .losses import ContrastConfig
from .model import ModelConfig
from .training import FinetuneConfig, TrainConfig

SEED_ENV_VAR = "PIVOT_ALIGN_SEED"
DEFAULT_SEED = 13


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs, resolved from a config file."""

    seed: int = DEFAULT_SEED
    corpus: CorpusSpec = dataclasses.field(default_factory=CorpusSpec)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    finetune: FinetuneConfig = dataclasses.field(default_factory=FinetuneConfig)
    decode: DecodeConfig = dataclasses.field(default_factory=DecodeConfig)
    model_overrides: dict = dataclasses.field(default_factory=dict)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model_overrides)

    def flattened(self) -> dict:
        """Dotted key -> value map of the full effective configuration."""
        out = {"seed": self.seed}
        for prefix, obj in (("corpus", self.corpus), ("train", self.train),
                            ("finetune", self.finetune), ("eval", self.decode)):
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                if dataclasses.is_dataclass(value):
                    for g in dataclasses.fields(value):
                        out[f"{prefix}.{f.name}.{g.name}"] = getattr(value, g.name)
                else:
                    out[f"{prefix}.{f.name}"] = value
        model_defaults = {f.name: f.default for f in dataclasses.fields(ModelConfig)
                          if f.name != "vocab_size"}
        model_defaults.update(self.model_overrides)
        for name, value in model_defaults.items():
            out[f"model.{name}"] = value
        return out


def _field_types(cls) -> dict:
    return {f.name: t for f, t in
            ((f, typing.get_type_hints(cls)[f.name]) for f in dataclasses.fields(cls))}


def _coerce(raw: str, target_type, key: str):
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        raise ConfigError(f"{key}: expected true or false, got {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {target_type.__name__}")
    if target_type is str:
        return raw
    raise ConfigError(f"{key}: unsupported field type {target_type!r}")


def parse_assignments(text: str) -> dict:
    """Raw `key = value` lines -> ordered dict of string assignments."""
    assignments: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        if key in assignments:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        assignments[key] = value
    return assignments


_SECTIONS = {
    "corpus": CorpusSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "train.contrast": ContrastConfig,
    "finetune": FinetuneConfig,
    "eval": DecodeConfig,
}


def _split_key(key: str) -> tuple[str, str]:
    section, _, name = key.rpartition(".")
    if section not in _SECTIONS or not name:
        raise ConfigError(f"unknown config key {key!r}")
    return section, name


def parse_config(text: str) -> ExperimentConfig:
    assignments = parse_assignments(text)
    sections: dict = {name: {} for name in _SECTIONS}
    seed = None
    for key, raw in assignments.items():
        if key == "seed":
            seed = _coerce(raw, int, key)
            continue
        section, name = _split_key(key)
        types = _field_types(_SECTIONS[section])
        if section == "model" and name == "vocab_size":
            raise ConfigError("model.vocab_size is derived from the corpus")
        if section == "train" and name == "contrast":
            raise ConfigError("set train.contrast.* fields individually")
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        sections[section][name] = _coerce(raw, types[name], key)

    try:
        corpus = CorpusSpec(**sections["corpus"])
        contrast = ContrastConfig(**sections["train.contrast"])
        train_kwargs = dict(sections["train"])
        if sections["train.contrast"]:
            train_kwargs["contrast"] = contrast
        train = TrainConfig(**train_kwargs)
        finetune = FinetuneConfig(**sections["finetune"])
        decode = DecodeConfig(**sections["eval"])
        if sections["model"]:
            ModelConfig(vocab_size=8, **sections["model"])  # validate early
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc))

    if seed is not None:
        if "seed" not in sections["train"]:
            train = replace(train, seed=seed)
        if "seed" not in sections["finetune"]:
            finetune = replace(finetune, seed=seed)
    cfg = ExperimentConfig(seed=seed if seed is not None else DEFAULT_SEED,
                           corpus=corpus, train=train, finetune=finetune,
                           decode=decode, model_overrides=sections["model"])
    return _apply_env_seed(cfg)


def _apply_env_seed(cfg: ExperimentConfig) -> ExperimentConfig:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}")
    return replace(cfg, seed=seed,
                   train=replace(cfg.train, seed=seed),
                   finetune=replace(cfg.finetune, seed=seed))


def load_config(path=None) -> ExperimentConfig:
    """Read a config file; with no path, return the defaults.

    The PIVOT_ALIGN_SEED environment variable is applied either way.
    """
    if path is None:
        return _apply_env_seed(ExperimentConfig())
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"))
