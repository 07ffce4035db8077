"""Qualitative explanations: top-activating image grids, single-concept flips,
and the global class-concept relevance matrix."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy.optimize import linear_sum_assignment

from .data import ConceptDataset
from .errors import EvaluationError
from .metrics import argmax, collect, scale_concepts
from .model import AnteHocModel, evaluating

DEFAULT_K = 5
DEFAULT_TOP_PAIRS = 10


@dataclass
class ConceptGrid:
    concept_index: int
    ranked: list[tuple[int, float]]
    truncated: bool = False
    image_path: Optional[Path] = None

    @property
    def sample_ids(self) -> list[int]:
        return [sid for sid, _ in self.ranked]


class FlipDirection(str, Enum):
    TO_CORRECT = "to_correct"
    TO_INCORRECT = "to_incorrect"


@dataclass(frozen=True)
class FlipExample:
    sample_id: int
    label: int
    original_prediction: int
    intervened_prediction: int
    concept_index: int
    direction: FlipDirection


@dataclass
class RelevanceMatrix:
    matrix: np.ndarray  # (K, C); rows of empty classes are NaN
    omega: float
    class_counts: np.ndarray
    class_names: list[str] = field(default_factory=list)

    @property
    def defined(self) -> np.ndarray:
        return self.class_counts > 0

    def top_pairs(self, n: int = DEFAULT_TOP_PAIRS) -> list[tuple[int, int, float]]:
        """Highest-proportion (class, concept, proportion) triples over defined rows."""
        pairs = [
            (k, c, float(self.matrix[k, c]))
            for k in np.flatnonzero(self.defined)
            for c in range(self.matrix.shape[1])
        ]
        pairs.sort(key=lambda t: (-t[2], t[0], t[1]))
        return [(int(k), int(c), p) for k, c, p in pairs[:n]]

    def argmax_concepts(self) -> dict[int, int]:
        """Most relevant concept per defined class (lowest index on ties)."""
        return {int(k): int(np.argmax(self.matrix[k])) for k in np.flatnonzero(self.defined)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "concept", "proportion"])
        K, C = self.matrix.shape
        for k in range(K):
            for c in range(C):
                v = self.matrix[k, c]
                w.writerow([k, c, "nan" if np.isnan(v) else f"{v:.6f}"])
        return buf.getvalue()


def top_activating_images(
    model: AnteHocModel, dataset: ConceptDataset, concept_index: int, k: int = DEFAULT_K,
    concepts: Optional[torch.Tensor] = None,
) -> ConceptGrid:
    """The ``k`` samples with the highest activation of one concept.

    Ties go to the lower sample id. A dataset smaller than ``k`` returns
    everything with ``truncated`` set.
    """
    C = model.config.num_concepts
    if not 0 <= concept_index < C:
        raise IndexError(f"concept_index {concept_index} outside [0, {C})")
    if k < 1:
        raise ValueError("k must be >= 1")
    if concepts is None:
        concepts = collect(model, dataset).concepts
    acts = concepts[:, concept_index].tolist()
    ids = dataset.ids.tolist()
    order = sorted(range(len(ids)), key=lambda i: (-acts[i], ids[i]))
    ranked = [(ids[i], acts[i]) for i in order[:k]]
    return ConceptGrid(concept_index, ranked, truncated=len(ids) < k)


def find_flip_examples(
    model: AnteHocModel,
    dataset: ConceptDataset,
    max_examples: int = 5,
    exhaustive: bool = False,
) -> list[FlipExample]:
    """Single-concept interventions that change the concept-path prediction.

    Concepts of each sample are tried in descending scaled activation; by
    default only the first flipping concept is kept per sample, ``exhaustive``
    keeps all of them. Collection stops once ``max_examples`` flips of each
    direction are found.
    """
    if max_examples <= 0 or len(dataset) == 0:
        return []
    out = collect(model, dataset)
    scaled = scale_concepts(out.concepts)
    base = argmax(out.surrogate_logits)
    found: list[FlipExample] = []
    counts = dict.fromkeys(FlipDirection, 0)
    C = out.concepts.shape[1]
    with evaluating(model):
        for i in range(len(dataset)):
            if all(v >= max_examples for v in counts.values()):
                break
            c = out.concepts[i]
            y, y_hat = int(out.labels[i]), int(base[i])
            order = sorted(range(C), key=lambda j: (-float(scaled[i, j]), j))
            trials = c.unsqueeze(0).repeat(C, 1)
            trials[torch.arange(C), torch.arange(C)] = 0.0
            preds = argmax(model.surrogate_logits(trials)).tolist()
            for j in order:
                y_int = preds[j]
                if y_int == y_hat:
                    continue
                direction = FlipDirection.TO_CORRECT if y_int == y else FlipDirection.TO_INCORRECT
                if counts[direction] < max_examples:
                    counts[direction] += 1
                    found.append(
                        FlipExample(int(out.ids[i]), y, y_hat, y_int, j, direction)
                    )
                if not exhaustive:
                    break
    return found


def replay_flip(model: AnteHocModel, dataset: ConceptDataset, flip: FlipExample) -> int:
    """Re-run the recorded intervention and return the new prediction."""
    pos = (dataset.ids == flip.sample_id).nonzero()
    if len(pos) != 1:
        raise KeyError(flip.sample_id)
    with evaluating(model):
        c = model.concepts(dataset.images[pos[0]])
        c[0, flip.concept_index] = 0.0
        return int(argmax(model.surrogate_logits(c))[0])


def relevance_from_concepts(
    concepts: torch.Tensor, labels: torch.Tensor, num_classes: int, omega: float
) -> tuple[np.ndarray, np.ndarray]:
    active = (scale_concepts(concepts) > omega).numpy()
    labels = labels.numpy()
    C = concepts.shape[1]
    matrix = np.full((num_classes, C), np.nan)
    counts = np.bincount(labels, minlength=num_classes)[:num_classes]
    for k in range(num_classes):
        if counts[k]:
            matrix[k] = active[labels == k].sum(0) / counts[k]
    return matrix, counts


def class_concept_relevance(
    model: AnteHocModel, dataset: ConceptDataset, omega: Optional[float] = None
) -> RelevanceMatrix:
    """Entry (k, c): share of class-k samples whose scaled concept c exceeds ``omega``."""
    omega = model.config.omega if omega is None else omega
    if not 0.0 <= omega <= 1.0:
        raise EvaluationError(f"omega must lie in [0, 1], got {omega}")
    out = collect(model, dataset)
    matrix, counts = relevance_from_concepts(out.concepts, out.labels, model.config.num_classes, omega)
    return RelevanceMatrix(matrix, float(omega), counts, list(dataset.class_names))


# -- oracle alignment -----------------------------------------------------------


def match_concepts_to_attributes(concepts: torch.Tensor, attributes: torch.Tensor) -> dict[int, int]:
    """One-to-one concept -> attribute assignment maximising total Pearson correlation.

    Unsupervised concepts carry no attribute identity, so this matching is what
    lets them be scored against generator ground truth.
    """
    x = concepts.double().numpy()
    a = attributes.double().numpy()
    x = x - x.mean(0)
    a = a - a.mean(0)
    denom = np.outer(np.linalg.norm(x, axis=0), np.linalg.norm(a, axis=0))
    corr = np.divide(x.T @ a, denom, out=np.zeros((x.shape[1], a.shape[1])), where=denom > 0)
    rows, cols = linear_sum_assignment(-corr)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def oracle_alignment(
    relevance: RelevanceMatrix,
    defining: dict[int, int],
    concept_to_attribute: Optional[dict[int, int]] = None,
) -> float:
    """Fraction of classes whose most relevant concept is their defining attribute.

    ``concept_to_attribute`` defaults to the identity (supervised concepts).
    """
    top = relevance.argmax_concepts()
    classes = [k for k in defining if k in top]
    if not classes:
        raise EvaluationError("no class with both samples and a defining attribute")
    if concept_to_attribute is None:
        hits = sum(top[k] == defining[k] for k in classes)
    else:
        hits = sum(concept_to_attribute.get(top[k]) == defining[k] for k in classes)
    return hits / len(classes)


# -- export ---------------------------------------------------------------------


def _thumb(img: torch.Tensor, scale: int = 2) -> Image.Image:
    arr = (img.clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    im = Image.fromarray(arr)
    return im.resize((im.width * scale, im.height * scale), Image.NEAREST)


def render_strip(images: Sequence[torch.Tensor], pad: int = 2) -> Image.Image:
    thumbs = [_thumb(im).convert("RGB") for im in images]
    if not thumbs:
        return Image.new("RGB", (1, 1), (255, 255, 255))
    w = sum(t.width for t in thumbs) + pad * (len(thumbs) + 1)
    h = max(t.height for t in thumbs) + 2 * pad
    strip = Image.new("RGB", (w, h), (255, 255, 255))
    x = pad
    for t in thumbs:
        strip.paste(t, (x, pad))
        x += t.width + pad
    return strip


def _image_of(dataset: ConceptDataset, sample_id: int) -> torch.Tensor:
    pos = (dataset.ids == sample_id).nonzero()
    return dataset.images[int(pos[0])]


def export_report(
    grids: Sequence[ConceptGrid],
    flips: Sequence[FlipExample],
    relevance: RelevanceMatrix,
    out_dir: str | Path,
    dataset: ConceptDataset,
    top_n: int = DEFAULT_TOP_PAIRS,
) -> Path:
    """Write grids, flip gallery, relevance table and an index; returns the index path."""
    out = Path(out_dir)
    (out / "grids").mkdir(parents=True, exist_ok=True)
    for g in grids:
        path = out / "grids" / f"concept_{g.concept_index:03d}.png"
        render_strip([_image_of(dataset, sid) for sid in g.sample_ids]).save(path, format="PNG")
        g.image_path = path

    gallery = ["# Single-concept flips", ""]
    if not flips:
        gallery.append("no flips found")
    else:
        (out / "flips").mkdir(exist_ok=True)
        gallery += [
            "| # | sample | label | prediction | after intervention | concept | direction | image |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for i, f in enumerate(flips):
            name = f"flip_{i:03d}_sample{f.sample_id}.png"
            _thumb(_image_of(dataset, f.sample_id), scale=3).save(out / "flips" / name, format="PNG")
            gallery.append(
                f"| {i} | {f.sample_id} | {f.label} | {f.original_prediction} | "
                f"{f.intervened_prediction} | {f.concept_index} | {f.direction.value} | "
                f"![](flips/{name}) |"
            )
    (out / "flips.md").write_text("\n".join(gallery) + "\n")

    (out / "relevance.csv").write_text(relevance.to_csv())
    pairs = ["class,concept,proportion"] + [f"{k},{c},{p:.6f}" for k, c, p in relevance.top_pairs(top_n)]
    (out / "relevance_top_pairs.csv").write_text("\n".join(pairs) + "\n")

    lines = [
        f"# Concept explanations: {dataset.name}",
        "",
        f"- relevance threshold omega = {relevance.omega}",
        "- [class-concept relevance](relevance.csv)",
        "- [top class-concept pairs](relevance_top_pairs.csv)",
        f"- [single-concept flips](flips.md) ({len(flips)} found)",
        "",
        "## Top activating images per concept",
        "",
    ]
    for g in grids:
        ids = ", ".join(str(s) for s in g.sample_ids)
        note = " (truncated)" if g.truncated else ""
        lines.append(f"- concept {g.concept_index}: samples {ids}{note}")
        lines.append(f"  ![concept {g.concept_index}](grids/concept_{g.concept_index:03d}.png)")
    undefined = [int(k) for k in np.flatnonzero(~relevance.defined)]
    if undefined:
        lines += ["", f"Classes without samples (relevance undefined): {undefined}"]
    index = out / "index.md"
    index.write_text("\n".join(lines) + "\n")
    return index
