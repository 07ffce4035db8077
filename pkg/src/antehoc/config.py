"""Experiment configuration: one YAML file with nested sections, dotted-path overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .data import ConceptDataset, DatasetManifest, SyntheticSpec, generate_synthetic, load_attribute_dataset, load_image_dataset
from .errors import ConfigError
from .metrics import STANDARD_METRICS
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = ("model", "data", "train", "evaluate", "explain", "output_dir")


@dataclass
class EvaluateConfig:
    metrics: tuple[str, ...] = STANDARD_METRICS
    omegas: tuple[float, ...] = (0.5,)
    split: str = "test"

    def __post_init__(self):
        self.metrics = tuple(self.metrics)
        self.omegas = tuple(float(w) for w in self.omegas)
        bad = set(self.metrics) - set(STANDARD_METRICS)
        if bad:
            raise ConfigError(f"evaluate.metrics: unknown {sorted(bad)}; choose from {STANDARD_METRICS}")
        for w in self.omegas:
            if not 0.0 <= w <= 1.0:
                raise ConfigError(f"evaluate.omegas: {w} outside [0, 1]")


@dataclass
class ExplainConfig:
    k: int = 5
    max_flips: int = 5
    omega: Optional[float] = None
    exhaustive: bool = False
    split: str = "test"


@dataclass
class ExperimentConfig:
    model: ModelConfig
    data: dict[str, Any]
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    output_dir: str = "runs"
    base_dir: Path = Path(".")

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "data": copy.deepcopy(self.data),
            "train": self.train.to_dict(),
            "evaluate": {
                "metrics": list(self.evaluate.metrics),
                "omegas": list(self.evaluate.omegas),
                "split": self.evaluate.split,
            },
            "explain": dict(vars(self.explain)),
            "output_dir": self.output_dir,
        }

    @property
    def run_id(self) -> str:
        """Hash of everything that affects results (output location excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @property
    def out(self) -> Path:
        p = Path(self.output_dir)
        return p if p.is_absolute() else self.base_dir / p

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def parse_value(text: str) -> Any:
    """Parse an override value with YAML scalar rules (``true``, ``3``, ``[1, 2]``)."""
    return yaml.safe_load(text)


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.field=value")
        path, value = item.split("=", 1)
        keys = path.strip().split(".")
        node = raw
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {path!r}: {key!r} is not a section")
        node[keys[-1]] = parse_value(value)
    return raw


def _section(raw: dict[str, Any], name: str, cls):
    body = raw.get(name) or {}
    if not isinstance(body, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    try:
        return cls(**body)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _infer_model_fields(model: dict[str, Any], data: dict[str, Any]) -> dict[str, Any]:
    model = dict(model)
    syn = data.get("synthetic")
    if syn is not None:
        spec = SyntheticSpec(**syn)
        model.setdefault("image_shape", [3, spec.image_size, spec.image_size])
        model.setdefault("num_classes", spec.num_classes)
    return model


def experiment_from_dict(raw: dict[str, Any], base_dir: Path = Path(".")) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping with sections " + ", ".join(SECTIONS))
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    data = raw.get("data")
    if not isinstance(data, dict) or not ({"synthetic", "manifest"} & set(data)):
        raise ConfigError("data: needs either a 'synthetic' spec or a 'manifest' path")
    if "synthetic" in data and "manifest" in data:
        raise ConfigError("data: give 'synthetic' or 'manifest', not both")
    if "synthetic" in data:
        try:
            SyntheticSpec(**(data["synthetic"] or {}))
        except TypeError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from exc
        data = {**data, "synthetic": SyntheticSpec(**(data["synthetic"] or {})).to_dict()}
    model_raw = raw.get("model")
    if not isinstance(model_raw, dict):
        raise ConfigError("model section missing")
    try:
        model = ModelConfig.from_dict(_infer_model_fields(model_raw, data))
    except ConfigError as exc:
        raise ConfigError(f"model: {exc}") from exc
    return ExperimentConfig(
        model=model,
        data=data,
        train=_section(raw, "train", TrainConfig),
        evaluate=_section(raw, "evaluate", EvaluateConfig),
        explain=_section(raw, "explain", ExplainConfig),
        output_dir=str(raw.get("output_dir", "runs")),
        base_dir=base_dir,
    )


def load_experiment(path: str | Path, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    raw = apply_overrides(raw or {}, overrides or [])
    return experiment_from_dict(raw, base_dir=path.parent)


def load_splits(data: dict[str, Any], base_dir: Path = Path("."), num_concepts: Optional[int] = None) -> dict[str, ConceptDataset]:
    """Materialise the dataset selector of an experiment into named splits."""
    if "synthetic" in data:
        train, val, test = generate_synthetic(SyntheticSpec(**data["synthetic"]))
        return {"train": train, "val": val, "test": test}
    manifest_path = Path(data["manifest"])
    if not manifest_path.is_absolute():
        manifest_path = base_dir / manifest_path
    manifest = DatasetManifest.from_file(manifest_path)
    if data.get("attributes", manifest.attributes is not None):
        return load_attribute_dataset(
            manifest, num_concepts=num_concepts, continuous=bool(data.get("continuous", False))
        )
    return load_image_dataset(manifest)
