"""Run configuration: INI file with sections, overridden by command-line flags.

Sections map onto the dataclasses they configure::

    [data]   paths, sequence length and k-core threshold
    [synth]  SynthConfig fields
    [model]  ModelConfig fields (max_len comes from the dataset)
    [train]  TrainConfig fields
    [eval]   EvalProtocol fields plus ``seeds``
    [run]    seeds, workers, deterministic, variants
    [bench]  sweep settings
    [count]  item and feature vocabulary sizes for count-params without a dataset

Unknown sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .evaluation import EvalProtocol
from .model import ModelConfig
from .synthetic import SynthConfig
from .training import TrainConfig

FORMAT_VERSION = 1
DATA_DIR_ENV = "MIXREC_DATA_DIR"


@dataclass
class DataConfig:
    dataset: str = "dataset.mxrd"
    interactions: str = "interactions.tsv"
    features: str = ""
    schema: str = ""
    max_len: int = 50
    k_core: int = 5


@dataclass
class RunSection:
    seeds: tuple[int, ...] = (0,)
    workers: int = 1
    deterministic: bool = False
    out_dir: str = "runs"
    variants: tuple[str, ...] = (
        "full", "linear_feature_mixer", "simple_final_mix", "no_sequence_mixer",
        "no_channel_mixer", "no_feature_mixer", "mlp_mixer_plus", "pop_rec",
    )


@dataclass
class EvalSection:
    k: int = 10
    negatives: int = 100
    split: str = "test"
    seeds: tuple[int, ...] = (1, 2, 3)
    batch_size: int = 512


@dataclass
class BenchConfig:
    axis: str = "s"
    values: tuple[int, ...] = (32, 64, 128, 256)
    runs: int = 20
    batch: int = 32
    seq_hidden: int = 64
    channel_hidden: int = 64
    feature_hidden: int = 4
    embed_dim: int = 64
    max_len: int = 50
    n_features: int = 2
    n_items: int = 500
    n_layers: int = 2


@dataclass
class CountConfig:
    n_items: int = 0
    # comma-separated name:kind:vocab entries, e.g. "genre:token_sequence:18"
    features: str = ""


_SECTIONS = {
    "data": DataConfig,
    "synth": SynthConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalSection,
    "run": RunSection,
    "bench": BenchConfig,
    "count": CountConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)
    bench: BenchConfig = field(default_factory=BenchConfig)
    count: CountConfig = field(default_factory=CountConfig)

    def to_json(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        out["format_version"] = FORMAT_VERSION
        return out

    def protocol(self, seed: int, split: str | None = None) -> EvalProtocol:
        return EvalProtocol(k=self.eval.k, negatives=self.eval.negatives, seed=seed, split=split or self.eval.split)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        if self.run.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.run.seeds:
            raise ConfigError("at least one seed is required")

    def set(self, section: str, key: str, value) -> None:
        """Override one field; strings are parsed like file values."""
        obj = getattr(self, section)
        hints = _hints(type(obj))
        if key not in hints:
            raise ConfigError(f"unknown key [{section}] {key}")
        if isinstance(value, str):
            value = _coerce(value, hints[key], f"[{section}] {key}")
        setattr(self, section, dataclasses.replace(obj, **{key: value}))


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(text: str, typ, where: str):
    text = text.strip()
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(text, inner, where)
    if origin is tuple:
        inner = args[0]
        return tuple(_coerce(x, inner, where) for x in text.split(",") if x.strip())
    try:
        if typ is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {typ.__name__}") from None
    return text


def load_run_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in parser.items(section):
            cfg.set(section, key, value)
    return cfg


def resolve_data_path(path: str | os.PathLike) -> Path:
    """Relative paths that do not exist locally are looked up under ``MIXREC_DATA_DIR``."""
    p = Path(path)
    root = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and not p.exists() and root:
        return Path(root) / p
    return p
