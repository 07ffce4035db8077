"""Ante-hoc concept model: five subnetworks and the two prediction paths.

Task path:     x -> feature_encoder -> task_head                      (task logits)
Concept path:  x -> feature_encoder -> concept_encoder -> concept_classifier
Decoder:       concepts -> decoder -> reconstruction (training only)

The task path never touches the concept branch, so explanation quality can be
tuned without changing predictions.
"""
from __future__ import annotations

import contextlib
import dataclasses
import io
import json
import math
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Optional

import torch
from torch import nn

from .backbones import WeightsHook, build_backbone
from .errors import CheckpointError, ConfigError, InputError, UnsupportedOperationError

CHECKPOINT_FORMAT = "antehoc-checkpoint"
CHECKPOINT_VERSION = 1

COMPONENTS = (
    "feature_encoder",
    "task_head",
    "concept_encoder",
    "decoder",
    "concept_classifier",
)


class SupervisionMode(str, Enum):
    UNSUPERVISED = "unsupervised"
    SUPERVISED = "supervised"


@dataclass
class LossWeights:
    fidelity: float = 1.0
    reconstruction: float = 1.0
    # None resolves to 1.0 for supervised configs and 0.0 otherwise.
    concept: Optional[float] = None


@dataclass
class ModelConfig:
    image_shape: tuple[int, int, int]
    num_classes: int
    num_concepts: int
    backbone: str = "resnet18-class"
    supervision_mode: SupervisionMode = SupervisionMode.UNSUPERVISED
    use_decoder: bool = True
    bottleneck_mode: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    omega: float = 0.5
    seed: int = 0
    # "bce" on binary attributes, or "mse" on min-max normalised continuous ones.
    concept_loss: str = "bce"
    # "sigmoid": concepts in (0, 1), so zeroing one means "absent".
    # "identity": unbounded pre-activations.
    concept_activation: str = "sigmoid"

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.supervision_mode = SupervisionMode(self.supervision_mode)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        elif isinstance(self.loss_weights, (tuple, list)):
            self.loss_weights = LossWeights(*self.loss_weights)
        if self.loss_weights.concept is None:
            self.loss_weights.concept = 1.0 if self.supervised else 0.0
        self.validate()

    def validate(self) -> None:
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"image_shape must be (channels, height, width), got {self.image_shape}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_concepts < 1:
            raise ConfigError(f"num_concepts must be >= 1, got {self.num_concepts}")
        lw = self.loss_weights
        for name in ("fidelity", "reconstruction", "concept"):
            v = getattr(lw, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"loss_weights.{name} must be a finite nonnegative number, got {v}")
        if lw.concept > 0 and self.supervision_mode is not SupervisionMode.SUPERVISED:
            raise ConfigError("loss_weights.concept > 0 requires supervision_mode=supervised")
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigError(f"omega must lie in [0, 1], got {self.omega}")
        if self.concept_loss not in ("bce", "mse"):
            raise ConfigError(f"concept_loss must be 'bce' or 'mse', got {self.concept_loss!r}")
        if self.concept_activation not in ("sigmoid", "identity"):
            raise ConfigError(
                f"concept_activation must be 'sigmoid' or 'identity', got {self.concept_activation!r}"
            )

    @property
    def supervised(self) -> bool:
        return self.supervision_mode is SupervisionMode.SUPERVISED

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["supervision_mode"] = self.supervision_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        for required in ("image_shape", "num_classes", "num_concepts"):
            if d.get(required) is None:
                raise ConfigError(f"model config missing required field {required!r}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid model config: {exc}") from exc


@dataclass
class ForwardBundle:
    task_logits: torch.Tensor
    concepts: torch.Tensor
    surrogate_logits: torch.Tensor
    reconstruction: Optional[torch.Tensor] = None
    # Pre-activation of the concept encoder; equals ``concepts`` for identity activation.
    concept_logits: Optional[torch.Tensor] = None


@dataclass(frozen=True)
class ComponentCounts:
    feature_encoder: int
    task_head: int
    concept_encoder: int
    decoder: int
    concept_classifier: int

    @property
    def total(self) -> int:
        return (
            self.feature_encoder
            + self.task_head
            + self.concept_encoder
            + self.decoder
            + self.concept_classifier
        )

    def as_dict(self) -> dict[str, int]:
        d = dataclasses.asdict(self)
        d["total"] = self.total
        return d


class ConceptDecoder(nn.Module):
    """Linear projection of the concept vector followed by transposed convolutions.

    Each stage doubles the spatial size; the last stage emits image channels
    through a sigmoid so reconstructions live in [0, 1] like the inputs.
    """

    def __init__(self, num_concepts: int, image_shape: tuple[int, int, int]):
        super().__init__()
        c, h, w = image_shape
        stages = 4 if min(h, w) >= 128 else 3
        scale = 2**stages
        if h % scale or w % scale:
            raise ConfigError(
                f"decoder needs height/width divisible by {scale}, got {h}x{w}"
            )
        self.h0, self.w0 = h // scale, w // scale
        widths = [max(8, 64 >> i) for i in range(stages)]
        self.ch0 = widths[0]
        self.project = nn.Linear(num_concepts, self.ch0 * self.h0 * self.w0)
        layers: list[nn.Module] = []
        for i in range(stages):
            last = i == stages - 1
            out_ch = c if last else widths[i + 1]
            layers.append(nn.ConvTranspose2d(widths[i], out_ch, 4, stride=2, padding=1))
            layers.append(nn.Sigmoid() if last else nn.ReLU(inplace=True))
        self.deconv = nn.Sequential(*layers)
        self.calls = 0

    def forward(self, concepts: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        z = torch.relu(self.project(concepts))
        return self.deconv(z.view(-1, self.ch0, self.h0, self.w0))


def _seed_for(seed: int, component: str) -> int:
    # Independent per-component streams: adding or removing the decoder must not
    # shift the initialisation of the other components.
    return (seed * 1_000_003 + zlib.crc32(component.encode())) % (2**63)


@contextlib.contextmanager
def _seeded(seed: int) -> Iterator[None]:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class AnteHocModel(nn.Module):
    def __init__(self, config: ModelConfig, weights_hook: Optional[WeightsHook] = None):
        super().__init__()
        self.config = config
        with _seeded(_seed_for(config.seed, "feature_encoder")):
            self.feature_encoder, self.feature_dim = build_backbone(
                config.backbone, config.image_shape, weights_hook
            )
        K, C, D = config.num_classes, config.num_concepts, self.feature_dim
        with _seeded(_seed_for(config.seed, "task_head")):
            self.task_head = nn.Linear(D, K)
        with _seeded(_seed_for(config.seed, "concept_encoder")):
            self.concept_encoder = nn.Linear(D, C)
        with _seeded(_seed_for(config.seed, "concept_classifier")):
            self.concept_classifier = nn.Linear(C, K)
        self.decoder: Optional[ConceptDecoder] = None
        if config.use_decoder:
            with _seeded(_seed_for(config.seed, "decoder")):
                self.decoder = ConceptDecoder(C, config.image_shape)
        if config.bottleneck_mode:
            for p in self.task_head.parameters():
                p.requires_grad_(False)

    # -- raw paths (no mode switching, gradients allowed) --------------------

    def check_images(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.config.image_shape:
            raise InputError(
                f"expected images of shape (B, {', '.join(map(str, self.config.image_shape))}), "
                f"got {tuple(x.shape)}"
            )

    def check_concepts(self, c: torch.Tensor) -> None:
        if c.dim() != 2 or c.shape[1] != self.config.num_concepts:
            raise InputError(
                f"expected concept matrix of width {self.config.num_concepts}, got {tuple(c.shape)}"
            )

    def task_logits(self, x: torch.Tensor) -> torch.Tensor:
        self.check_images(x)
        return self.task_head(self.feature_encoder(x))

    def activate(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(z) if self.config.concept_activation == "sigmoid" else z

    def squash(self, c: torch.Tensor) -> torch.Tensor:
        """Map concept activations into [0, 1] for comparison with binary attributes."""
        return c if self.config.concept_activation == "sigmoid" else torch.sigmoid(c)

    def concepts(self, x: torch.Tensor) -> torch.Tensor:
        self.check_images(x)
        return self.activate(self.concept_encoder(self.feature_encoder(x)))

    def surrogate_logits(self, c: torch.Tensor) -> torch.Tensor:
        self.check_concepts(c)
        return self.concept_classifier(c)

    def forward(self, x: torch.Tensor, decode: bool = True) -> ForwardBundle:
        self.check_images(x)
        h = self.feature_encoder(x)
        z = self.concept_encoder(h)
        c = self.activate(z)
        rec = None
        if decode and self.decoder is not None:
            rec = self.decoder(c)
        return ForwardBundle(
            task_logits=self.task_head(h),
            concepts=c,
            concept_logits=z,
            surrogate_logits=self.concept_classifier(c),
            reconstruction=rec,
        )

    def predict_logits(self, x: torch.Tensor) -> torch.Tensor:
        """Logits of the reported prediction (surrogate path in bottleneck mode)."""
        if self.config.bottleneck_mode:
            return self.surrogate_logits(self.concepts(x))
        return self.task_logits(x)

    def component(self, name: str) -> Optional[nn.Module]:
        if name not in COMPONENTS:
            raise KeyError(name)
        return getattr(self, name)


@contextlib.contextmanager
def evaluating(model: nn.Module) -> Iterator[None]:
    """Eval mode + no_grad for the duration, restoring the previous mode."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        model.train(was_training)


def build_model(config: ModelConfig, weights_hook: Optional[WeightsHook] = None) -> AnteHocModel:
    config.validate()
    return AnteHocModel(config, weights_hook)


def forward_task(model: AnteHocModel, x: torch.Tensor) -> torch.Tensor:
    with evaluating(model):
        return model.task_logits(x)


def extract_concepts(model: AnteHocModel, x: torch.Tensor) -> torch.Tensor:
    with evaluating(model):
        return model.concepts(x)


def predict_from_concepts(model: AnteHocModel, c: torch.Tensor) -> torch.Tensor:
    with evaluating(model):
        return model.surrogate_logits(c)


def reconstruct(model: AnteHocModel, x: torch.Tensor) -> torch.Tensor:
    if model.decoder is None:
        raise UnsupportedOperationError("model was built with use_decoder=false")
    with evaluating(model):
        return model.decoder(model.concepts(x))


def forward_full(model: AnteHocModel, x: torch.Tensor) -> ForwardBundle:
    with evaluating(model):
        return model(x)


def predict(model: AnteHocModel, x: torch.Tensor) -> torch.Tensor:
    with evaluating(model):
        return model.predict_logits(x)


def _count(module: Optional[nn.Module]) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


def parameter_counts(model: AnteHocModel) -> ComponentCounts:
    # Counts every parameter of each component; bottleneck_mode freezes the task
    # head's gradients but its weights still occupy storage.
    return ComponentCounts(**{name: _count(model.component(name)) for name in COMPONENTS})


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(
    model: AnteHocModel, path: str | Path, metadata: Optional[dict[str, Any]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "config": json.dumps(model.config.to_dict(), sort_keys=True),
        "components": {
            name: mod.state_dict()
            for name in COMPONENTS
            if (mod := model.component(name)) is not None
        },
        "metadata": json.dumps(metadata or {}, sort_keys=True),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    """Load and validate the raw checkpoint payload (config parsed, not built)."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint archive ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an antehoc checkpoint")
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    try:
        payload["config"] = ModelConfig.from_dict(json.loads(payload["config"]))
        payload["metadata"] = json.loads(payload.get("metadata", "{}"))
    except (KeyError, json.JSONDecodeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid embedded config: {exc}") from exc
    return payload


def load_checkpoint(
    path: str | Path, expect: Optional[dict[str, Any]] = None
) -> AnteHocModel:
    """Rebuild a model from ``path``.

    ``expect`` maps config field names to required values; any disagreement
    (e.g. a different ``num_concepts``) raises :class:`CheckpointError`.
    """
    payload = read_checkpoint(path)
    config: ModelConfig = payload["config"]
    stored = config.to_dict()
    for key, want in (expect or {}).items():
        if key not in stored:
            raise CheckpointError(f"unknown config field in expectation: {key!r}")
        have = stored[key]
        if isinstance(want, tuple):
            want = list(want)
        if have != want:
            raise CheckpointError(f"{path}: checkpoint has {key}={have!r}, requested {want!r}")
    model = build_model(config)
    blobs = payload["components"]
    for name in COMPONENTS:
        mod = model.component(name)
        if (mod is None) != (name not in blobs):
            raise CheckpointError(f"{path}: component {name!r} presence does not match config")
        if mod is not None:
            try:
                mod.load_state_dict(blobs[name])
            except RuntimeError as exc:
                raise CheckpointError(f"{path}: cannot restore {name}: {exc}") from exc
    model.eval()
    return model


def checkpoint_metadata(path: str | Path) -> dict[str, Any]:
    return read_checkpoint(path)["metadata"]
