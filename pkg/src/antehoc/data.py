"""Datasets: in-memory container, manifest loaders, synthetic oracle generator, batching."""
from __future__ import annotations

import hashlib
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

import numpy as np
import torch
import yaml
from PIL import Image

from .errors import ConfigError, DataError


@dataclass
class AttributeSample:
    image: torch.Tensor
    label: int
    attributes: Optional[torch.Tensor]
    sample_id: int


@dataclass
class Batch:
    images: torch.Tensor
    labels: torch.Tensor
    attributes: Optional[torch.Tensor]
    ids: torch.Tensor

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class ConceptDataset(torch.utils.data.Dataset):
    """Images in [0, 1], integer labels, optional attribute matrix, stable sample ids."""

    images: torch.Tensor
    labels: torch.Tensor
    attributes: Optional[torch.Tensor] = None
    ids: Optional[torch.Tensor] = None
    name: str = "dataset"
    class_names: list[str] = field(default_factory=list)
    attribute_names: Optional[list[str]] = None

    def __post_init__(self):
        self.images = torch.as_tensor(self.images, dtype=torch.float32)
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        n = len(self.labels)
        if self.images.dim() != 4 or self.images.shape[0] != n:
            raise DataError(f"images must be (N, C, H, W) with N={n}, got {tuple(self.images.shape)}")
        if self.ids is None:
            self.ids = torch.arange(n)
        self.ids = torch.as_tensor(self.ids, dtype=torch.long)
        if self.attributes is not None:
            self.attributes = torch.as_tensor(self.attributes, dtype=torch.float32)
            if self.attributes.dim() != 2 or self.attributes.shape[0] != n:
                raise DataError(
                    f"attributes must be (N, C) with N={n}, got {tuple(self.attributes.shape)}"
                )

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> AttributeSample:
        return AttributeSample(
            image=self.images[i],
            label=int(self.labels[i]),
            attributes=None if self.attributes is None else self.attributes[i],
            sample_id=int(self.ids[i]),
        )

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        return int(self.labels.max()) + 1 if len(self) else 0

    @property
    def has_attributes(self) -> bool:
        return self.attributes is not None

    def subset(self, index: torch.Tensor | Sequence[int], name: Optional[str] = None) -> "ConceptDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        return ConceptDataset(
            images=self.images[index],
            labels=self.labels[index],
            attributes=None if self.attributes is None else self.attributes[index],
            ids=self.ids[index],
            name=name or self.name,
            class_names=list(self.class_names),
            attribute_names=None if self.attribute_names is None else list(self.attribute_names),
        )

    def as_batch(self) -> Batch:
        return Batch(self.images, self.labels, self.attributes, self.ids)


def batches(dataset: ConceptDataset, batch_size: int, seed: Optional[int] = 0) -> Iterator[Batch]:
    """Seeded shuffle into consecutive batches; the last partial batch is kept.

    ``seed=None`` keeps dataset order (used for evaluation).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if seed is None:
        order = torch.arange(n)
    else:
        g = torch.Generator().manual_seed(int(seed))
        order = torch.randperm(n, generator=g)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(
            images=dataset.images[idx],
            labels=dataset.labels[idx],
            attributes=None if dataset.attributes is None else dataset.attributes[idx],
            ids=dataset.ids[idx],
        )


# -- synthetic oracle -----------------------------------------------------------

SHAPES = ("square", "circle", "triangle", "cross")
FACTORS = SHAPES + ("red", "bright_bg", "top", "left", "large")
CLASS_RULES = ("onehot", "binary")


@dataclass
class SyntheticSpec:
    """Generative description of the synthetic shapes dataset.

    ``attributes`` are binary visual factors drawn from :data:`FACTORS`. The
    ``onehot`` rule makes the first ``num_classes`` attributes mutually
    exclusive and the class is the index of the one that is set; ``binary``
    reads the class from the leading attribute bits (modulo ``num_classes``).
    Remaining attributes are free fair coin flips.

    ``samples_per_class`` counts training samples; validation and test splits
    get 15/70 of that each, so the pool splits 70/15/15.
    """

    attributes: tuple[str, ...] = ("square", "circle", "triangle", "cross", "red", "bright_bg")
    num_classes: int = 4
    class_rule: str = "onehot"
    samples_per_class: int = 100
    noise: float = 0.05
    image_size: int = 32
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        self.attributes = tuple(self.attributes)
        self.validate()

    def validate(self) -> None:
        unknown = [a for a in self.attributes if a not in FACTORS]
        if unknown:
            raise ConfigError(f"unknown synthetic factors {unknown}; choose from {FACTORS}")
        if len(set(self.attributes)) != len(self.attributes):
            raise ConfigError("synthetic attributes must be distinct")
        if self.class_rule not in CLASS_RULES:
            raise ConfigError(f"class_rule must be one of {CLASS_RULES}, got {self.class_rule!r}")
        if self.num_classes < 2:
            raise ConfigError("synthetic num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.image_size < 16 or self.image_size % 8:
            raise ConfigError("image_size must be a multiple of 8 and >= 16")
        n = len(self.attributes)
        if self.class_rule == "onehot" and self.num_classes > n:
            raise ConfigError(
                f"onehot rule over {n} attributes cannot reach {self.num_classes} classes"
            )
        if self.class_rule == "binary" and self.class_bits > n:
            raise ConfigError(
                f"binary rule needs {self.class_bits} attribute bits for "
                f"{self.num_classes} classes, only {n} attributes"
            )

    @property
    def class_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.num_classes)))

    @property
    def split_sizes(self) -> tuple[int, int, int]:
        n = self.samples_per_class
        held = max(1, round(n * 15 / 70))
        return n, held, held

    def class_of(self, attrs: np.ndarray) -> np.ndarray:
        """The class rule, vectorised over rows of a binary attribute matrix."""
        attrs = np.asarray(attrs)
        K = self.num_classes
        if self.class_rule == "onehot":
            head = attrs[..., :K]
            if np.any(head.sum(-1) != 1):
                raise DataError("onehot rule requires exactly one of the leading attributes set")
            return head.argmax(-1)
        bits = attrs[..., : self.class_bits].astype(np.int64)
        value = (bits << np.arange(self.class_bits)).sum(-1)
        return value % K

    def defining_attribute(self, k: int) -> Optional[int]:
        """Attribute index that by itself identifies class ``k`` (onehot rule only)."""
        return k if self.class_rule == "onehot" else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "attributes": list(self.attributes),
            "num_classes": self.num_classes,
            "class_rule": self.class_rule,
            "samples_per_class": self.samples_per_class,
            "noise": self.noise,
            "image_size": self.image_size,
            "seed": self.seed,
            "name": self.name,
        }


def _sample_attributes(spec: SyntheticSpec, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    A = len(spec.attributes)
    out = (rng.random((n, A)) < 0.5).astype(np.int64)
    if spec.class_rule == "onehot":
        out[:, : spec.num_classes] = 0
        out[:, k] = 1
    else:
        b = spec.class_bits
        values = np.array([v for v in range(2**b) if v % spec.num_classes == k])
        picked = values[rng.integers(0, len(values), size=n)]
        out[:, :b] = (picked[:, None] >> np.arange(b)) & 1
    return out


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        # hollow frame, so it cannot be confused with a filled disk
        edge = np.maximum(np.abs(dy), np.abs(dx))
        return (edge <= r) & (edge >= r - max(1.5, r / 3))
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "triangle":
        # apex up; width grows linearly towards the base
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if kind == "cross":
        w = max(1.0, r / 3)
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    raise ValueError(kind)


def render(spec: SyntheticSpec, attrs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one (3, S, S) image in [0, 1] from a binary attribute row."""
    S = spec.image_size
    flags = {name: bool(v) for name, v in zip(spec.attributes, attrs)}
    bg = 0.6 if flags.get("bright_bg") else 0.1
    img = np.full((3, S, S), bg, dtype=np.float64)
    color = np.array([0.9, 0.1, 0.1]) if flags.get("red") else np.array([0.1, 0.2, 0.9])
    if "top" in flags or "left" in flags:
        cy = S * (0.3 if flags.get("top") else 0.7)
        cx = S * (0.3 if flags.get("left") else 0.7)
        base_r = S * (0.25 if flags.get("large") else 0.15)
    else:
        cy = cx = S / 2
        base_r = S * (0.32 if flags.get("large") else 0.22)
    cy += rng.uniform(-1.5, 1.5)
    cx += rng.uniform(-1.5, 1.5)
    r = base_r * rng.uniform(0.9, 1.1)
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    for kind in SHAPES:
        if flags.get(kind):
            mask = _shape_mask(kind, yy, xx, cy, cx, r)
            img[:, mask] = color[:, None]
    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> tuple[ConceptDataset, ConceptDataset, ConceptDataset]:
    """Return (train, val, test); deterministic in ``spec.seed``.

    Attribute rows exactly encode the factors used to render each image and
    every label equals ``spec.class_of`` of its attribute row.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_tr, n_va, n_te = spec.split_sizes
    per_class = n_tr + n_va + n_te
    attrs_all, labels_all, images_all, split_of = [], [], [], []
    for k in range(spec.num_classes):
        attrs = _sample_attributes(spec, k, per_class, rng)
        assignment = np.array([0] * n_tr + [1] * n_va + [2] * n_te)
        rng.shuffle(assignment)
        for row, s in zip(attrs, assignment):
            images_all.append(render(spec, row, rng))
            attrs_all.append(row)
            labels_all.append(k)
            split_of.append(s)
    attrs_all = np.stack(attrs_all)
    labels = spec.class_of(attrs_all)
    assert np.array_equal(labels, np.array(labels_all))
    images = torch.from_numpy(np.stack(images_all))
    full = ConceptDataset(
        images=images,
        labels=torch.from_numpy(labels),
        attributes=torch.from_numpy(attrs_all.astype(np.float32)),
        ids=torch.arange(len(labels)),
        name=spec.name,
        class_names=[f"class{k}" for k in range(spec.num_classes)],
        attribute_names=list(spec.attributes),
    )
    split_of = np.array(split_of)
    names = ("train", "val", "test")
    return tuple(
        full.subset(np.flatnonzero(split_of == s), name=f"{spec.name}:{names[s]}") for s in range(3)
    )


# -- manifests ------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: Path
    splits: dict[str, Any]
    classes: list[str]
    name: str = "dataset"
    format: str = "files"
    attributes: Optional[dict[str, Any]] = None
    checksums: dict[str, str] = field(default_factory=dict)
    image_size: Optional[tuple[int, int]] = None
    source: Optional[Path] = None

    @classmethod
    def from_file(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except FileNotFoundError:
            raise DataError(f"manifest not found: {path}") from None
        except yaml.YAMLError as exc:
            raise DataError(f"{path}: malformed manifest: {exc}") from exc
        if not isinstance(raw, dict):
            raise DataError(f"{path}: manifest is empty or not a mapping")
        return cls.from_dict(raw, base=path.parent, source=path)

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base: Path = Path("."), source: Optional[Path] = None) -> "DatasetManifest":
        if not raw.get("splits"):
            raise DataError("manifest declares no splits")
        fmt = raw.get("format", "files")
        if fmt not in ("files", "cifar10"):
            raise DataError(f"unknown manifest format {fmt!r}")
        attrs = raw.get("attributes")
        if attrs is not None:
            if "file" not in attrs:
                raise DataError("manifest attributes section needs a 'file'")
            gran = attrs.get("granularity", "per-image")
            if gran not in ("per-image", "per-class"):
                raise DataError(f"attribute granularity must be per-image or per-class, got {gran!r}")
        size = raw.get("image_size")
        return cls(
            root=(base / raw.get("root", ".")).resolve(),
            splits=dict(raw["splits"]),
            classes=list(raw.get("classes") or []),
            name=raw.get("name", source.stem if source else "dataset"),
            format=fmt,
            attributes=attrs,
            checksums=dict(raw.get("checksums") or {}),
            image_size=None if size is None else (int(size[0]), int(size[1])),
            source=source,
        )


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _split_entries(manifest: DatasetManifest, split: str) -> list[tuple[str, int]]:
    spec = manifest.splits[split]
    if isinstance(spec, str):
        listing = manifest.root / spec
        if not listing.exists() and manifest.source is not None:
            listing = manifest.source.parent / spec
        entries = []
        try:
            lines = listing.read_text().splitlines()
        except FileNotFoundError:
            raise DataError(f"split listing not found: {listing}") from None
        for lineno, line in enumerate(lines, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.rsplit(maxsplit=1)
            if len(parts) != 2:
                raise DataError(f"{listing}:{lineno}: expected '<path> <label>'")
            try:
                entries.append((parts[0], int(parts[1])))
            except ValueError:
                raise DataError(f"{listing}:{lineno}: label {parts[1]!r} is not an integer") from None
        return entries
    out = []
    for e in spec:
        if isinstance(e, dict):
            out.append((str(e["path"]), int(e["label"])))
        else:
            out.append((str(e[0]), int(e[1])))
    return out


def _verify(manifest: DatasetManifest, rel_paths: Sequence[str]) -> None:
    missing = [p for p in rel_paths if not (manifest.root / p).exists()]
    if missing:
        raise DataError(f"{len(missing)} referenced files missing: {missing[:20]}")
    bad = [
        p
        for p, digest in manifest.checksums.items()
        if (manifest.root / p).exists() and _sha256(manifest.root / p) != digest
    ]
    bad += [p for p in manifest.checksums if not (manifest.root / p).exists()]
    if bad:
        raise DataError(f"checksum mismatch for: {sorted(set(bad))}")


def _decode(path: Path, size: Optional[tuple[int, int]]) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _load_cifar_split(manifest: DatasetManifest, files: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for name in files:
        with open(manifest.root / name, "rb") as fh:
            try:
                d = pickle.load(fh, encoding="bytes")
            except Exception as exc:
                raise DataError(f"{name}: not a CIFAR-10 batch file ({exc})") from exc
        data = d.get(b"data", d.get("data"))
        lab = d.get(b"labels", d.get("labels"))
        if data is None or lab is None:
            raise DataError(f"{name}: missing data/labels keys")
        images.append(np.asarray(data, dtype=np.uint8).reshape(-1, 3, 32, 32))
        labels.append(np.asarray(lab, dtype=np.int64))
    return np.concatenate(images).astype(np.float32) / 255.0, np.concatenate(labels)


def load_image_dataset(manifest: DatasetManifest | str | Path) -> dict[str, ConceptDataset]:
    """Load every split of a manifest, in manifest order, without attributes."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.from_file(manifest)
    out: dict[str, ConceptDataset] = {}
    offset = 0
    if manifest.format == "cifar10":
        _verify(manifest, [f for files in manifest.splits.values() for f in files])
        for split, files in manifest.splits.items():
            images, labels = _load_cifar_split(manifest, files)
            n = len(labels)
            out[split] = ConceptDataset(
                images, labels, ids=torch.arange(offset, offset + n),
                name=f"{manifest.name}:{split}",
                class_names=manifest.classes or [str(k) for k in range(10)],
            )
            offset += n
        return out
    entries = {split: _split_entries(manifest, split) for split in manifest.splits}
    all_paths = [p for es in entries.values() for p, _ in es]
    if not all_paths:
        raise DataError("manifest lists no samples")
    _verify(manifest, all_paths)
    for split, es in entries.items():
        if not es:
            raise DataError(f"split {split!r} is empty")
        arrays = [_decode(manifest.root / p, manifest.image_size) for p, _ in es]
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise DataError(f"split {split!r} mixes image sizes {sorted(shapes)}; set image_size")
        labels = np.array([lab for _, lab in es])
        K = len(manifest.classes)
        if K and (labels.min() < 0 or labels.max() >= K):
            raise DataError(f"split {split!r} has labels outside [0, {K})")
        n = len(es)
        out[split] = ConceptDataset(
            np.stack(arrays), labels, ids=torch.arange(offset, offset + n),
            name=f"{manifest.name}:{split}",
            class_names=manifest.classes,
        )
        offset += n
    return out


def read_attribute_matrix(path: str | Path) -> np.ndarray:
    """Whitespace-separated numeric matrix, one row per unit."""
    path = Path(path)
    rows: list[list[float]] = []
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise DataError(f"attribute file not found: {path}") from None
    width = None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            row = [float(tok) for tok in line.split()]
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric attribute entry") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DataError(f"{path}:{lineno}: row has {len(row)} entries, expected {width}")
        rows.append(row)
    if not rows:
        raise DataError(f"{path}: attribute file is empty")
    return np.asarray(rows, dtype=np.float64)


def binarize_attributes(a: np.ndarray) -> np.ndarray:
    return (np.asarray(a) > 0).astype(np.float32)


def normalize_attributes(a: np.ndarray) -> np.ndarray:
    """Per-column min-max to [0, 1]; constant columns map to 0."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(0), a.max(0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return ((a - lo) / span).astype(np.float32)


def load_attribute_dataset(
    manifest: DatasetManifest | str | Path,
    attribute_file: Optional[str | Path] = None,
    num_concepts: Optional[int] = None,
    continuous: bool = False,
) -> dict[str, ConceptDataset]:
    """Load all splits with attribute vectors attached.

    Per-image attribute rows follow the concatenated manifest order of all
    splits; per-class rows are indexed by label. Values are binarised at > 0
    unless ``continuous`` is set, in which case they are min-max normalised.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.from_file(manifest)
    section = manifest.attributes or {}
    if attribute_file is None:
        if "file" not in section:
            raise DataError("no attribute file given and manifest has no attributes section")
        attribute_file = manifest.root / section["file"]
        if not Path(attribute_file).exists() and manifest.source is not None:
            attribute_file = manifest.source.parent / section["file"]
    matrix = read_attribute_matrix(attribute_file)
    width = matrix.shape[1]
    names = section.get("names")
    if num_concepts is not None and width != num_concepts:
        raise DataError(f"attribute width {width} does not match num_concepts={num_concepts}")
    if names is not None and len(names) != width:
        raise DataError(f"{len(names)} attribute names for {width} attribute columns")
    values = normalize_attributes(matrix) if continuous else binarize_attributes(matrix)
    splits = load_image_dataset(manifest)
    granularity = section.get("granularity", "per-image")
    total = sum(len(d) for d in splits.values())
    if granularity == "per-image":
        if len(values) != total:
            raise DataError(f"{len(values)} attribute rows for {total} samples")
    else:
        K = len(manifest.classes) or max(int(d.labels.max()) for d in splits.values()) + 1
        if len(values) != K:
            raise DataError(f"{len(values)} per-class attribute rows for {K} classes")
    offset = 0
    for split, ds in splits.items():
        n = len(ds)
        if granularity == "per-image":
            ds.attributes = torch.from_numpy(values[offset : offset + n])
        else:
            ds.attributes = torch.from_numpy(values[ds.labels.numpy()])
        ds.attribute_names = names
        offset += n
    return splits
