"""Experiment configuration: schema, YAML loading, ablation presets.

Config files are YAML mappings mirroring the dataclass tree below.
Unknown keys are rejected with the offending path; lists convert to the
tuples the dataclasses expect.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SceneSpec
from .inference import InferenceSettings
from .model import (
    TABLE3_CONFIGS,
    TABLE4_CONFIGS,
    HeadConfig,
    ModelConfig,
)
from .targets import SAMPLER_PRESETS, SamplerConfig


class ConfigFileError(ValueError):
    """Configuration file violates the schema."""


@dataclass
class OptimizerConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    steps: int = 300
    batch_size: int = 4
    decay_steps: tuple[int, ...] = ()
    decay_factor: float = 0.1
    grad_clip: float = 10.0
    train_proposals: int = 64  # stage-1 proposals forwarded per image at train time


@dataclass
class EvalSettings:
    ar_ks: tuple[int, ...] = (10, 20, 30, 50, 100, 300, 1000)
    iou_thresholds: tuple[float, ...] = (0.5,)
    seen_iou: float = 0.5
    max_detections: int = 100


@dataclass
class DataConfig:
    train_annotations: str = ""
    val_annotations: str = ""
    train_seen_only: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)


def _convert(hint, value, where: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        return build_dataclass(hint, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigFileError(f"{where}: expected a list")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        return tuple(value)
    if origin is typing.Union:
        if value is None:
            return None
        for arg in typing.get_args(hint):
            if arg is type(None):
                continue
            return _convert(arg, value, where)
    return value


def build_dataclass(cls, data, where: str = "$"):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigFileError(f"{where}: expected a mapping for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigFileError(f"{where}: unknown keys {unknown}")
    kwargs = {
        name: _convert(hints[name], value, f"{where}.{name}")
        for name, value in data.items()
    }
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigFileError(f"{where}: {e}") from e


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigFileError(f"{path}: invalid YAML: {e}") from e
    return build_dataclass(ExperimentConfig, raw, where=str(path))


def config_to_dict(config) -> dict:
    return dataclasses.asdict(config)


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(config), f, sort_keys=True)


def default_sampler_for(head: HeadConfig) -> SamplerConfig:
    """Quality-only heads train without background; classifier heads need it."""
    if head.stage1_has_class:
        return SAMPLER_PRESETS["classifier_default"]
    return SAMPLER_PRESETS["quality_no_bg"]


def with_head(base: ExperimentConfig, head: HeadConfig,
              sampler: SamplerConfig | None = None) -> ExperimentConfig:
    """Derive a run configuration with a different head (and sampler)."""
    return dataclasses.replace(
        base,
        model=dataclasses.replace(base.model, head=head),
        sampler=sampler or default_sampler_for(head),
    )


def ablation_matrix(preset: str) -> dict[str, tuple[HeadConfig, SamplerConfig]]:
    """Named preset matrices for the ablation runner.

    ``table3``: the cue matrix rows a-j. ``table4``: classifier add-on
    rows. ``table5``: background-ratio and threshold sweep on the best
    quality config vs the classifier baseline.
    """
    if preset == "table3":
        return {row: (head, default_sampler_for(head)) for row, head in TABLE3_CONFIGS.items()}
    if preset == "table4":
        return {row: (head, default_sampler_for(head)) for row, head in TABLE4_CONFIGS.items()}
    if preset == "table5":
        quality = TABLE3_CONFIGS["i"]
        classifier = TABLE3_CONFIGS["e"]
        return {
            "quality_no_bg": (quality, SAMPLER_PRESETS["quality_no_bg"]),
            "quality_one_bg": (quality, SAMPLER_PRESETS["quality_one_bg"]),
            "classifier_default": (classifier, SAMPLER_PRESETS["classifier_default"]),
            "classifier_loose_thr": (classifier, SAMPLER_PRESETS["classifier_loose_thr"]),
            "classifier_one_bg": (classifier, SAMPLER_PRESETS["classifier_one_bg"]),
            "classifier_one_bg_loose_thr": (
                classifier,
                SAMPLER_PRESETS["classifier_one_bg_loose_thr"],
            ),
        }
    raise ConfigFileError(f"unknown ablation preset {preset!r}; use table3, table4 or table5")
