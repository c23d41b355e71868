"""
Run configuration: schema, strict loading from TOML/JSON and hashing.

Unknown keys are rejected with the dotted path of the offending field.
Per-stage training seeds and determinism flags are derived from the
top-level ``seed``/``deterministic``/``device`` keys and cannot be set per
stage.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigurationError
from .losses import VARIANTS
from .model import ModelConfig
from .trainer.loop import TrainConfig
from .voldata import SyntheticSpec

PIPELINES = ("cascade2d", "cascade3d", "combined2d")
BUNDLED = Path(__file__).parent / "configs"
DERIVED_TRAIN_KEYS = {"seed", "deterministic", "device"}


@dataclass
class DatasetSection:
    manifest: str = ""  # empty: generate the synthetic dataset below
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class ModelSection:
    liver: ModelConfig = field(default_factory=ModelConfig)
    lesion: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class TrainSection:
    liver: TrainConfig = field(default_factory=TrainConfig)
    lesion: TrainConfig = field(default_factory=lambda: TrainConfig(
        loss="combined", crop_policy="in_and_around_region"))


@dataclass
class MiningSection:
    variant: str = "dice"
    liver: bool = True
    lesion: bool = True
    rounds: int = 1
    export_masks: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")
        if self.rounds != 1:
            raise ConfigurationError("only a single mining round is supported")


@dataclass
class EvalSection:
    split: str = "val"
    largest_component: bool = True
    mask_lesion: bool = True
    connectivity: int = 26
    overlays: int = 2
    output_dir: str = "runs"  # run root unless MASKMINE_RUN_DIR is set

    def __post_init__(self):
        if self.split not in ("train", "val", "test", "all"):
            raise ConfigurationError(f"unknown split {self.split!r}")
        if self.connectivity not in (6, 26):
            raise ConfigurationError("connectivity must be 6 or 26")


@dataclass
class RunConfig:
    pipeline: str = "cascade2d"
    seed: int = 0
    deterministic: bool = True
    device: str = "cpu"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    mining: MiningSection = field(default_factory=MiningSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigurationError(f"pipeline must be one of {PIPELINES}")
        if self.device not in ("cpu", "accelerator"):
            raise ConfigurationError("device must be 'cpu' or 'accelerator'")
        self.resolve()

    def resolve(self):
        """Push the global seed/determinism/device into both training stages."""
        for i, tc in enumerate((self.train.liver, self.train.lesion)):
            tc.seed = self.seed * 1000 + i
            tc.deterministic = self.deterministic
            tc.device = self.device
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for stage in ("liver", "lesion"):
            for k in DERIVED_TRAIN_KEYS:
                d["train"][stage].pop(k)
        return d

    def digest(self) -> str:
        """Short hash of everything that can change results (not the output location)."""
        d = self.to_dict()
        d["eval"].pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _is_dc(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if _is_dc(tp):
        return build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    return value


def build(cls, data, path: str = "config", exclude=frozenset()):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a table, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    if cls is TrainConfig:
        exclude = exclude | DERIVED_TRAIN_KEYS
    names = {f.name for f in dataclasses.fields(cls) if f.init} - set(exclude)
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{path}.{unknown[0]}: unknown key")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def _merge_stage_defaults(data: dict) -> dict:
    # the lesion stage defaults differ from a bare TrainConfig
    train = data.get("train")
    if isinstance(train, dict) and isinstance(train.get("lesion"), dict):
        lesion = {"loss": "combined", "crop_policy": "in_and_around_region"}
        lesion.update(train["lesion"])
        data = dict(data, train=dict(train, lesion=lesion))
    return data


def from_dict(data: dict) -> RunConfig:
    return build(RunConfig, _merge_stage_defaults(data))


def resolve_config_path(name) -> Path:
    """A file path, or the name of a bundled config (e.g. ``desk``)."""
    p = Path(name)
    if p.exists():
        return p
    bundled = BUNDLED / f"{name}.toml"
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"config {name} not found (neither a file nor a bundled config)")


def load_config(path) -> RunConfig:
    p = resolve_config_path(path)
    text = p.read_text()
    try:
        data = json.loads(text) if p.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"{p}: cannot parse: {exc}") from exc
    return from_dict(data)


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return path
