"""Quantitative explanation metrics: faithfulness, fidelity, explanation error, interventions.

Every metric runs the model in evaluation mode over the dataset in its stored
order and aggregates with fixed-order sums, so results are deterministic and
independent of how the dataset is shuffled.

Interventions: concepts are min-max scaled per sample into [0, 1]; those whose
scaled value is strictly above ``omega`` are set to zero in the concept vector
handed to the concept classifier. With ``omega = 1`` nothing is zeroed and the
result equals faithfulness exactly.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import torch

from .data import ConceptDataset, batches
from .errors import EvaluationError
from .model import AnteHocModel, evaluating

EVAL_BATCH = 256
SUMMARY_HEADER = ("run_id", "dataset", "metric", "omega", "value", "n")


@dataclass
class MetricReport:
    metric: str
    value: float
    unit: str
    dataset: str
    n: int
    omega: Optional[float] = None
    checkpoint: Optional[str] = None
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.n <= 0:
            raise EvaluationError("metric computed over zero samples")
        if self.unit == "%" and not 0.0 <= self.value <= 100.0:
            raise EvaluationError(f"percentage {self.value} outside [0, 100]")
        if self.unit == "L2" and self.value < 0:
            raise EvaluationError("distance must be nonnegative")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "MetricReport":
        return cls(**json.loads(Path(path).read_text()))


def append_summary(path: str | Path, reports: list[MetricReport], run_id: str) -> Path:
    """Append one row per report to the comma-separated cross-run summary."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(SUMMARY_HEADER)
        for r in reports:
            omega = "" if r.omega is None else repr(float(r.omega))
            w.writerow([run_id, r.dataset, r.metric, omega, f"{r.value:.6f}", r.n])
    return path


# -- primitives -----------------------------------------------------------------


def scale_concepts(c: torch.Tensor, per_concept: bool = False) -> torch.Tensor:
    """Min-max scale concept activations into [0, 1].

    Default is per sample (each row independently). ``per_concept`` scales each
    column over the batch instead. Constant rows/columns map to all zeros.
    """
    c = torch.as_tensor(c)
    squeeze = c.dim() == 1
    if squeeze:
        c = c.unsqueeze(0)
    dim = 0 if per_concept else 1
    lo = c.amin(dim=dim, keepdim=True)
    hi = c.amax(dim=dim, keepdim=True)
    span = hi - lo
    out = torch.where(span > 0, (c - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(c))
    out = out.clamp(0.0, 1.0)
    return out.squeeze(0) if squeeze else out


def intervene(c_scaled: torch.Tensor, omega: float) -> torch.Tensor:
    """Zero every entry strictly greater than ``omega``; ties at ``omega`` are kept."""
    c_scaled = torch.as_tensor(c_scaled)
    return c_scaled.masked_fill(c_scaled > omega, 0.0)


def intervention_mask(c: torch.Tensor, omega: float, per_concept: bool = False) -> torch.Tensor:
    """Boolean mask of the concepts an intervention at ``omega`` zeroes."""
    return scale_concepts(c, per_concept=per_concept) > omega


def apply_intervention(c: torch.Tensor, omega: float, per_concept: bool = False) -> torch.Tensor:
    return c.masked_fill(intervention_mask(c, omega, per_concept), 0.0)


def argmax(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class.
    return logits.argmax(dim=-1)


@dataclass
class Outputs:
    task_logits: torch.Tensor
    concepts: torch.Tensor
    surrogate_logits: torch.Tensor
    labels: torch.Tensor
    attributes: Optional[torch.Tensor]
    ids: torch.Tensor

    @property
    def predictions(self) -> torch.Tensor:
        return argmax(self.task_logits)


def collect(model: AnteHocModel, dataset: ConceptDataset, batch_size: int = EVAL_BATCH) -> Outputs:
    """Run task and concept paths (never the decoder) over the dataset in order."""
    if len(dataset) == 0:
        raise EvaluationError(f"dataset {dataset.name!r} is empty")
    tl, cs, sl = [], [], []
    with evaluating(model):
        for b in batches(dataset, batch_size, seed=None):
            bundle = model(b.images, decode=False)
            tl.append(bundle.task_logits)
            cs.append(bundle.concepts)
            sl.append(bundle.surrogate_logits)
    return Outputs(
        task_logits=torch.cat(tl),
        concepts=torch.cat(cs),
        surrogate_logits=torch.cat(sl),
        labels=dataset.labels,
        attributes=dataset.attributes,
        ids=dataset.ids,
    )


def _percent(hits: torch.Tensor) -> float:
    return 100.0 * int(hits.sum()) / hits.numel()


def _report(metric, value, unit, dataset, **kw) -> MetricReport:
    return MetricReport(metric=metric, value=float(value), unit=unit, dataset=dataset.name, n=len(dataset), **kw)


# -- metrics --------------------------------------------------------------------


def accuracy(model: AnteHocModel, dataset: ConceptDataset, outputs: Optional[Outputs] = None) -> MetricReport:
    """Accuracy of the reported prediction (surrogate path in bottleneck mode)."""
    out = outputs or collect(model, dataset)
    logits = out.surrogate_logits if model.config.bottleneck_mode else out.task_logits
    return _report("accuracy", _percent(argmax(logits) == out.labels), "%", dataset)


def faithfulness(model: AnteHocModel, dataset: ConceptDataset, outputs: Optional[Outputs] = None) -> MetricReport:
    out = outputs or collect(model, dataset)
    return _report("faithfulness", _percent(argmax(out.surrogate_logits) == out.labels), "%", dataset)


def fidelity_metric(model: AnteHocModel, dataset: ConceptDataset, outputs: Optional[Outputs] = None) -> MetricReport:
    out = outputs or collect(model, dataset)
    hits = argmax(out.task_logits) == argmax(out.surrogate_logits)
    return _report("fidelity", _percent(hits), "%", dataset)


def explanation_error(model: AnteHocModel, dataset: ConceptDataset, outputs: Optional[Outputs] = None) -> MetricReport:
    """Mean per-sample L2 distance between squashed concepts and the attribute vector.

    Squashing is the sigmoid of the concept encoder's pre-activation, i.e. the
    concepts themselves under sigmoid activation.
    """
    if dataset.attributes is None:
        raise EvaluationError(f"explanation_error needs ground-truth attributes; {dataset.name!r} has none")
    C = model.config.num_concepts
    if dataset.attributes.shape[1] != C:
        raise EvaluationError(f"attribute width {dataset.attributes.shape[1]} != num_concepts {C}")
    out = outputs or collect(model, dataset)
    squashed = model.squash(out.concepts.double())
    dist = torch.linalg.vector_norm(squashed - dataset.attributes.double(), dim=1)
    return _report("explanation_error", dist.sum().item() / len(dist), "L2", dataset, params={"squash": "sigmoid"})


def intervention_accuracy(
    model: AnteHocModel,
    dataset: ConceptDataset,
    omega: float,
    outputs: Optional[Outputs] = None,
    per_concept: bool = False,
) -> MetricReport:
    """Accuracy of the concept classifier after zeroing concepts scaled above ``omega``."""
    if not 0.0 <= omega <= 1.0:
        raise EvaluationError(f"omega must lie in [0, 1], got {omega}")
    out = outputs or collect(model, dataset)
    c_int = apply_intervention(out.concepts, omega, per_concept=per_concept)
    with evaluating(model):
        logits = model.surrogate_logits(c_int)
    return _report(
        "intervention_accuracy",
        _percent(argmax(logits) == out.labels),
        "%",
        dataset,
        omega=float(omega),
        params={"scaling": "per_concept" if per_concept else "per_sample"},
    )


STANDARD_METRICS = ("accuracy", "faithfulness", "fidelity", "explanation_error", "intervention")


def evaluate(
    model: AnteHocModel,
    dataset: ConceptDataset,
    metrics: tuple[str, ...] = STANDARD_METRICS,
    omegas: tuple[float, ...] = (0.5,),
    checkpoint: Optional[str] = None,
) -> list[MetricReport]:
    """Compute several metrics from one pass over the dataset."""
    unknown = set(metrics) - set(STANDARD_METRICS)
    if unknown:
        raise EvaluationError(f"unknown metrics {sorted(unknown)}; choose from {STANDARD_METRICS}")
    if "explanation_error" in metrics and dataset.attributes is None:
        raise EvaluationError(f"explanation_error needs ground-truth attributes; {dataset.name!r} has none")
    out = collect(model, dataset)
    reports: list[MetricReport] = []
    for m in metrics:
        if m == "accuracy":
            reports.append(accuracy(model, dataset, out))
        elif m == "faithfulness":
            reports.append(faithfulness(model, dataset, out))
        elif m == "fidelity":
            reports.append(fidelity_metric(model, dataset, out))
        elif m == "explanation_error":
            reports.append(explanation_error(model, dataset, out))
        elif m == "intervention":
            reports.extend(intervention_accuracy(model, dataset, w, out) for w in omegas)
    for r in reports:
        r.checkpoint = checkpoint
    return reports
