"""Training loop over the joint objective."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import torch

from .data import Batch, ConceptDataset, batches
from .errors import ConfigError, TrainingError
from .losses import total_loss
from .metrics import accuracy
from .model import AnteHocModel, ModelConfig, build_model

log = logging.getLogger(__name__)

LOSS_TERMS = ("task", "fidelity", "reconstruction", "concept", "total")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    cosine: bool = False
    flip: bool = False
    crop: bool = False
    # Learning-rate multiplier for the concept classifier. Its inputs live in
    # [0, 1], so it needs large weights to match confident task predictions.
    head_lr_scale: float = 10.0
    # Exclude decoder parameters from the optimizer (ablation support).
    freeze_decoder: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("train.lr must be positive")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    scheduler: Optional[Any] = None
    epoch: int = 0
    running: dict[str, float] = field(default_factory=dict)
    best_val_accuracy: float = -1.0

    @property
    def rng_state(self) -> torch.Tensor:
        return self.generator.get_state()

    def state_dict(self) -> dict[str, Any]:
        return {
            "epoch": self.epoch,
            "optimizer": self.optimizer.state_dict(),
            "scheduler": None if self.scheduler is None else self.scheduler.state_dict(),
            "running": dict(self.running),
            "best_val_accuracy": self.best_val_accuracy,
            "rng_state": self.rng_state,
        }

    def load_state_dict(self, d: dict[str, Any]) -> None:
        self.epoch = d["epoch"]
        self.optimizer.load_state_dict(d["optimizer"])
        if self.scheduler is not None and d["scheduler"] is not None:
            self.scheduler.load_state_dict(d["scheduler"])
        self.running = dict(d["running"])
        self.best_val_accuracy = d["best_val_accuracy"]
        self.generator.set_state(d["rng_state"])


def init_state(model: AnteHocModel, train: TrainConfig) -> TrainState:
    base, head = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad or (train.freeze_decoder and name.startswith("decoder.")):
            continue
        (head if name.startswith("concept_classifier.") else base).append(p)
    groups = [{"params": base}]
    if head:
        groups.append({"params": head, "lr": train.lr * train.head_lr_scale})
    opt = torch.optim.Adam(groups, lr=train.lr, weight_decay=train.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=train.epochs) if train.cosine else None
    gen = torch.Generator().manual_seed(model.config.seed)
    return TrainState(optimizer=opt, generator=gen, scheduler=sched)


def _augment(images: torch.Tensor, train: TrainConfig, gen: torch.Generator) -> torch.Tensor:
    if train.flip:
        flip = torch.rand(len(images), generator=gen) < 0.5
        images = torch.where(flip[:, None, None, None], images.flip(-1), images)
    if train.crop:
        pad = 4
        padded = torch.nn.functional.pad(images, (pad, pad, pad, pad), mode="reflect")
        H, W = images.shape[-2:]
        offs = torch.randint(0, 2 * pad + 1, (len(images), 2), generator=gen)
        images = torch.stack(
            [padded[i, :, y : y + H, x : x + W] for i, (y, x) in enumerate(offs.tolist())]
        )
    return images


def _step(model: AnteHocModel, batch: Batch, state: TrainState, train: TrainConfig) -> dict[str, float]:
    cfg = model.config
    images = _augment(batch.images, train, state.generator)
    decode = model.decoder is not None and cfg.loss_weights.reconstruction > 0
    bundle = model(images, decode=decode)
    attrs = batch.attributes if cfg.loss_weights.concept > 0 else None
    losses = total_loss(bundle, batch.labels, cfg, images=images, attributes=attrs)
    values = losses.to_dict()
    for term in LOSS_TERMS:
        if not math.isfinite(values[term]):
            raise TrainingError(
                f"non-finite {term} loss ({values[term]}) at epoch {state.epoch}; aborting"
            )
    state.optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    state.optimizer.step()
    return values


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 100_003 + epoch


def train_epoch(
    model: AnteHocModel, dataset: ConceptDataset, state: TrainState, train: TrainConfig
) -> TrainState:
    """One optimizer pass over ``dataset``; ``state.running`` gets sample-weighted mean losses."""
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    if model.config.loss_weights.concept > 0 and dataset.attributes is None:
        raise ConfigError("concept supervision requested but the training set has no attributes")
    model.train()
    sums = dict.fromkeys(LOSS_TERMS, 0.0)
    for batch in batches(dataset, train.batch_size, seed=_epoch_seed(model.config.seed, state.epoch)):
        values = _step(model, batch, state, train)
        for term in LOSS_TERMS:
            sums[term] += values[term] * len(batch)
    if state.scheduler is not None:
        state.scheduler.step()
    state.running = {term: sums[term] / len(dataset) for term in LOSS_TERMS}
    state.epoch += 1
    return state


def check_dataset(config: ModelConfig, dataset: ConceptDataset, role: str) -> None:
    if dataset.image_shape != config.image_shape:
        raise ConfigError(f"{role} images are {dataset.image_shape}, config expects {config.image_shape}")
    if len(dataset) and int(dataset.labels.max()) >= config.num_classes:
        raise ConfigError(f"{role} labels exceed num_classes={config.num_classes}")
    if config.supervised:
        if dataset.attributes is None:
            raise ConfigError(f"supervised mode needs attributes in the {role} set")
        if dataset.attributes.shape[1] != config.num_concepts:
            raise ConfigError(
                f"{role} attributes have width {dataset.attributes.shape[1]}, "
                f"num_concepts={config.num_concepts}"
            )


def fit(
    config: ModelConfig,
    dataset_train: ConceptDataset,
    dataset_val: ConceptDataset,
    train: Optional[TrainConfig] = None,
    model: Optional[AnteHocModel] = None,
) -> tuple[AnteHocModel, list[dict[str, Any]]]:
    """Train for ``train.epochs`` and return the best-validation model and history.

    History records hold the epoch's mean loss terms and validation accuracy.
    """
    train = train or TrainConfig()
    check_dataset(config, dataset_train, "training")
    check_dataset(config, dataset_val, "validation")
    if len(dataset_val) == 0:
        raise TrainingError("validation set is empty")
    if model is None:
        model = build_model(config)
    state = init_state(model, train)
    history: list[dict[str, Any]] = []
    best = None
    for _ in range(train.epochs):
        train_epoch(model, dataset_train, state, train)
        val_acc = accuracy(model, dataset_val).value
        record = {"epoch": state.epoch, **state.running, "val_accuracy": val_acc}
        history.append(record)
        log.info("epoch %d %s", state.epoch, json.dumps(record))
        # Ties go to the later epoch: same accuracy, more training of the concept branch.
        if val_acc >= state.best_val_accuracy:
            state.best_val_accuracy = val_acc
            best = copy.deepcopy(model.state_dict())
    model.load_state_dict(best)
    model.eval()
    return model, history


def write_history(history: list[dict[str, Any]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_history(path: str | Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
