"""Experiment configuration: one structured file per experiment.

A config has five sections (``dataset``, ``model``, ``training``, ``eval``,
``ablation``).  Every section is validated on load, unknown keys are
rejected, and the resolved form is written next to the outputs so a run can
be repeated from its output directory alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import DEFAULT_RATIOS, PRESETS, SyntheticConfig, preset
from .errors import InvalidConfigError
from .fusion import ModelConfig
from .training import TrainConfig

MODEL_KINDS = ("drfuse", "ehr_only", "image_only", "concat")


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(section: str, data: dict, allowed: set[str]) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise InvalidConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _build(cls, section: str, data: dict | None):
    data = dict(data or {})
    _reject_unknown(section, data, _field_names(cls))
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidConfigError(f"{section}: {exc}") from None


@dataclass
class DatasetSection:
    """Either a generated dataset on disk (``manifest``) or an in-memory
    synthetic one (``preset`` plus ``synthetic`` overrides)."""

    manifest: str | None = None
    preset: str | None = None
    synthetic: dict = field(default_factory=dict)
    split_seed: int | None = None  # None: the manifest's seed, or 0
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if self.manifest is not None and (self.preset is not None or self.synthetic):
            raise InvalidConfigError("dataset: give either a manifest or a synthetic spec, not both")
        if self.preset is not None and self.preset not in PRESETS:
            raise InvalidConfigError(f"dataset: unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios) or abs(sum(self.ratios) - 1) > 1e-9:
            raise InvalidConfigError("dataset.ratios must be three positive numbers summing to 1")
        if self.manifest is None:
            self.synthetic_config()  # validates

    def synthetic_config(self) -> SyntheticConfig:
        _reject_unknown("dataset.synthetic", self.synthetic, _field_names(SyntheticConfig))
        return preset(self.preset or "default", **self.synthetic)


@dataclass
class EvalSection:
    n_boot: int = 1000
    level: float = 0.95
    seed: int = 0
    probe: bool = True

    def __post_init__(self):
        if self.n_boot < 0:
            raise InvalidConfigError("eval.n_boot must be >= 0")
        if not 0 < self.level < 1:
            raise InvalidConfigError("eval.level must lie in (0, 1)")


@dataclass
class AblationSection:
    train_on: str = "matched"
    variants: tuple[str, ...] = ("full", "w/o disentangled", "MSE alignment", "w/o attn ranking")

    def __post_init__(self):
        from .experiments import ABLATIONS

        self.variants = tuple(self.variants)
        if self.train_on not in ("matched", "full"):
            raise InvalidConfigError("ablation.train_on must be 'matched' or 'full'")
        bad = [v for v in self.variants if v not in ABLATIONS]
        if bad or not self.variants:
            raise InvalidConfigError(f"ablation.variants must be drawn from {ABLATIONS}, got {bad or '[]'}")


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: dict = field(default_factory=dict)  # ModelConfig overrides plus "kind"
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    SECTIONS = ("dataset", "model", "training", "eval", "ablation")

    def __post_init__(self):
        model = dict(self.model)
        _reject_unknown("model", model, _field_names(ModelConfig) | {"kind"})
        if model.get("kind", "drfuse") not in MODEL_KINDS:
            raise InvalidConfigError(f"model.kind must be one of {MODEL_KINDS}")
        self.model_config()  # validates with placeholder sizes

    @property
    def kind(self) -> str:
        return self.model.get("kind", "drfuse")

    def model_config(self, n_features: int | None = None, n_classes: int | None = None) -> ModelConfig:
        """ModelConfig for a dataset of the given shape; explicit sizes must agree."""
        overrides = {k: v for k, v in self.model.items() if k != "kind"}
        for key, actual in (("n_features", n_features), ("n_classes", n_classes)):
            if actual is None:
                continue
            given = overrides.get(key)
            if given is not None and int(given) != actual:
                raise InvalidConfigError(f"model.{key}={given} does not match the dataset ({actual})")
            overrides[key] = actual
        try:
            return ModelConfig(**overrides)
        except TypeError as exc:
            raise InvalidConfigError(f"model: {exc}") from None

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        data = dict(data or {})
        _reject_unknown("config", data, set(cls.SECTIONS))
        for name in cls.SECTIONS:
            if data.get(name) is not None and not isinstance(data[name], dict):
                raise InvalidConfigError(f"section {name!r} must be a mapping")
        return cls(
            dataset=_build(DatasetSection, "dataset", data.get("dataset")),
            model=dict(data.get("model") or {}),
            training=_build(TrainConfig, "training", data.get("training")),
            eval=_build(EvalSection, "eval", data.get("eval")),
            ablation=_build(AblationSection, "ablation", data.get("ablation")),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": _plain(dataclasses.asdict(self.dataset)),
            "model": _plain(dict(self.model)),
            "training": _plain(dataclasses.asdict(self.training)),
            "eval": _plain(dataclasses.asdict(self.eval)),
            "ablation": _plain(dataclasses.asdict(self.ablation)),
        }

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every seed (generator, split, training, bootstrap) set to ``seed``."""
        data = self.to_dict()
        if data["dataset"]["manifest"] is None:
            data["dataset"]["synthetic"]["seed"] = seed
        data["dataset"]["split_seed"] = seed
        data["training"]["seed"] = seed
        data["eval"]["seed"] = seed
        return ExperimentConfig.from_dict(data)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a YAML or JSON config; relative manifest paths resolve against the file."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise InvalidConfigError(f"{path}: not valid YAML/JSON ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise InvalidConfigError(f"{path}: top level must be a mapping")
    config = ExperimentConfig.from_dict(data)
    manifest = config.dataset.manifest
    if manifest is not None and not Path(manifest).is_absolute():
        config.dataset.manifest = str((path.parent / manifest).resolve())
    return config


def dump_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
