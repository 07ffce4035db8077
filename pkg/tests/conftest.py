from __future__ import annotations

import pytest
import torch
from torch import nn

from antehoc.backbones import BACKBONES, register_backbone
from antehoc.data import ConceptDataset
from antehoc.model import ModelConfig, build_model


class Flatten512(nn.Module):
    """Fixed-width feature extractor used to pin parameter counts."""

    def __init__(self, image_shape):
        super().__init__()
        c, h, w = image_shape
        self.proj = nn.Linear(c * h * w, 512)

    def forward(self, x):
        return self.proj(x.flatten(1))


if "flat-512" not in BACKBONES:
    register_backbone("flat-512", Flatten512)


def tiny_config(**kw) -> ModelConfig:
    base = dict(image_shape=(1, 8, 8), num_classes=3, num_concepts=4, backbone="tiny-mlp")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config())


def random_dataset(n: int, shape=(1, 8, 8), num_classes: int = 3, num_concepts: int = 4, seed: int = 0) -> ConceptDataset:
    g = torch.Generator().manual_seed(seed)
    return ConceptDataset(
        images=torch.rand(n, *shape, generator=g),
        labels=torch.arange(n) % num_classes,
        attributes=(torch.rand(n, num_concepts, generator=g) > 0.5).float(),
        name="random",
    )


# Six hand-built samples, two classes, two concepts. The concept classifier
# swaps the concepts (logit of class k = concept 1-k), so a sample is classified
# correctly exactly when its larger concept is the "other" index.
HAND_CONCEPTS = [
    [0.2, 0.9],  # class 0, predicted 0
    [0.1, 0.6],  # class 0, predicted 0
    [0.8, 0.3],  # class 0, predicted 1
    [0.7, 0.2],  # class 1, predicted 1
    [0.9, 0.4],  # class 1, predicted 1
    [0.3, 0.5],  # class 1, predicted 0
]
HAND_LABELS = [0, 0, 0, 1, 1, 1]
HAND_TASK_PRED = [0, 0, 0, 1, 1, 1]


def hand_model(bias=(0.0, 0.0)):
    m = build_model(ModelConfig(image_shape=(1, 8, 8), num_classes=2, num_concepts=2,
                                backbone="tiny-mlp", concept_activation="identity", use_decoder=False))
    with torch.no_grad():
        m.concept_classifier.weight.copy_(torch.tensor([[0.0, 1.0], [1.0, 0.0]]))
        m.concept_classifier.bias.copy_(torch.tensor(bias))
    return m.eval()


def hand_outputs(model, concepts=HAND_CONCEPTS, labels=HAND_LABELS, task_pred=HAND_TASK_PRED, attributes=None):
    from antehoc.metrics import Outputs

    c = torch.tensor(concepts, dtype=torch.float32)
    y = torch.tensor(labels)
    ds = ConceptDataset(images=torch.zeros(len(y), 1, 8, 8), labels=y, attributes=attributes, name="hand")
    with torch.no_grad():
        surrogate = model.surrogate_logits(c)
    task = torch.nn.functional.one_hot(torch.tensor(task_pred), 2).float()
    return ds, Outputs(task_logits=task, concepts=c, surrogate_logits=surrogate, labels=y,
                       attributes=ds.attributes, ids=ds.ids)


def finite_difference_check(model, loss_fn, num_coords: int = 60, eps: float = 1e-6, seed: int = 1):
    """Worst relative error between autograd and central differences on random coordinates."""
    model.zero_grad()
    loss_fn().backward()
    params = list(model.parameters())
    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    g = torch.Generator().manual_seed(seed)
    chosen = [coords[i] for i in torch.randperm(len(coords), generator=g)[:num_coords].tolist()]
    worst = 0.0
    for pi, j in chosen:
        p = params[pi]
        flat = p.data.view(-1)
        analytic = p.grad.view(-1)[j].item()
        orig = flat[j].item()
        with torch.no_grad():
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
        numeric = (up - down) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7))
    return worst, len(chosen)


# -- trained synthetic runs shared by the acceptance suite ---------------------

ACCEPTANCE_SEEDS = (0, 1, 2)


class SyntheticRuns:
    """Lazily trained oracle-experiment models, cached for the whole session."""

    def __init__(self):
        from antehoc.data import SyntheticSpec, generate_synthetic

        self.spec = SyntheticSpec(seed=0)
        self.train, self.val, self.test = generate_synthetic(self.spec)
        self._cache = {}

    def get(self, supervised: bool, decoder: bool = True, seed: int = 0):
        from antehoc.training import TrainConfig, fit

        key = (supervised, decoder, seed)
        if key not in self._cache:
            cfg = ModelConfig(
                image_shape=(3, 32, 32),
                num_classes=self.spec.num_classes,
                num_concepts=len(self.spec.attributes),
                supervision_mode="supervised" if supervised else "unsupervised",
                use_decoder=decoder,
                seed=seed,
            )
            self._cache[key] = fit(cfg, self.train, self.val, TrainConfig(epochs=20, batch_size=16))
        return self._cache[key]

    def model(self, supervised: bool, decoder: bool = True, seed: int = 0):
        return self.get(supervised, decoder, seed)[0]

    def trained_models(self):
        return [m for m, _ in self._cache.values()]


@pytest.fixture(scope="session")
def synthetic_runs():
    return SyntheticRuns()


CRITERIA_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int | str, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        CRITERIA_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
