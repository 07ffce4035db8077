import hashlib
import pickle

import numpy as np
import pytest
import torch
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from antehoc.data import (
    ConceptDataset,
    DatasetManifest,
    SyntheticSpec,
    batches,
    binarize_attributes,
    generate_synthetic,
    load_attribute_dataset,
    load_image_dataset,
    read_attribute_matrix,
)
from antehoc.errors import ConfigError, DataError

from conftest import random_dataset


@pytest.fixture(scope="module")
def synthetic():
    return generate_synthetic(SyntheticSpec())


# -- synthetic generator ------------------------------------------------------


def test_three_attribute_binary_rule_sizes():
    spec = SyntheticSpec(attributes=("square", "red", "bright_bg"), num_classes=4, class_rule="binary")
    train, val, test = generate_synthetic(spec)
    assert len(train) == 400
    assert len(val) == len(test) == 4 * 21
    assert set(train.labels.tolist()) == {0, 1, 2, 3}
    assert np.array_equal(spec.class_of(train.attributes.numpy()), train.labels.numpy())


def test_default_split_sizes_and_shapes(synthetic):
    train, val, test = synthetic
    assert (len(train), len(val), len(test)) == (400, 84, 84)
    assert train.image_shape == (3, 32, 32)
    assert train.attributes.shape == (400, 6)
    ids = torch.cat([d.ids for d in synthetic])
    assert len(set(ids.tolist())) == len(ids)


def test_synthetic_is_deterministic(synthetic):
    again = generate_synthetic(SyntheticSpec())
    for a, b in zip(synthetic, again):
        assert a.images.numpy().tobytes() == b.images.numpy().tobytes()
        assert torch.equal(a.attributes, b.attributes)
        assert torch.equal(a.labels, b.labels)
    other = generate_synthetic(SyntheticSpec(seed=1))[0]
    assert not torch.equal(other.images, synthetic[0].images)


def test_class_rule_reproduces_every_label(synthetic):
    spec = SyntheticSpec()
    for ds in synthetic:
        assert np.array_equal(spec.class_of(ds.attributes.numpy()), ds.labels.numpy())
        for k in range(4):
            rows = ds.attributes[ds.labels == k]
            assert (rows[:, spec.defining_attribute(k)] == 1).all()


def test_lookup_classifier_is_perfect(synthetic):
    # Ceiling for concept-path accuracy: labels are a function of attributes.
    train, _, test = synthetic
    table = {tuple(a): int(y) for a, y in zip(train.attributes.tolist(), train.labels.tolist())}
    hits = [table.get(tuple(a), SyntheticSpec().class_of(np.array(a))) == y
            for a, y in zip(test.attributes.tolist(), test.labels.tolist())]
    assert all(hits)


def test_synthetic_value_ranges(synthetic):
    for ds in synthetic:
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        assert set(ds.attributes.unique().tolist()) <= {0.0, 1.0}


@pytest.mark.parametrize(
    "kw",
    [
        dict(num_classes=7),  # onehot over 6 attributes cannot reach 7 classes
        dict(attributes=("red",), num_classes=4, class_rule="binary"),
        dict(attributes=("square", "wings")),
        dict(class_rule="xor"),
        dict(image_size=20),
    ],
)
def test_synthetic_spec_validation(kw):
    with pytest.raises(ConfigError):
        SyntheticSpec(**kw)


# -- batching ---------------------------------------------------------------


def test_batch_sizes():
    ds = random_dataset(10)
    assert [len(b) for b in batches(ds, 3)] == [3, 3, 3, 1]


def test_batch_order_seeded():
    ds = random_dataset(50)
    order = lambda seed: torch.cat([b.ids for b in batches(ds, 7, seed)]).tolist()
    assert order(1) == order(1)
    assert order(1) != order(2)
    assert [b.ids.tolist() for b in batches(ds, 50, seed=None)][0] == list(range(50))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 10_000))
def test_batches_form_a_permutation(n, size, seed):
    ds = random_dataset(n)
    ids = torch.cat([b.ids for b in batches(ds, size, seed)])
    assert sorted(ids.tolist()) == ds.ids.tolist()


def test_dataset_shape_validation():
    with pytest.raises(DataError):
        ConceptDataset(images=torch.zeros(3, 1, 4, 4), labels=[0, 1])
    with pytest.raises(DataError):
        ConceptDataset(images=torch.zeros(2, 1, 4, 4), labels=[0, 1], attributes=torch.zeros(3, 2))


# -- manifests --------------------------------------------------------------


def _png(path, color, size=(8, 8)):
    Image.new("RGB", size, color).save(path)


@pytest.fixture
def image_tree(tmp_path):
    (tmp_path / "img").mkdir()
    colors = [(255, 255, 255), (0, 0, 0), (255, 0, 0), (0, 255, 0), (0, 0, 255)]
    for i, c in enumerate(colors):
        _png(tmp_path / "img" / f"{i}.png", c)
    (tmp_path / "train.txt").write_text("img/0.png 0\nimg/1.png 1\n# comment\nimg/2.png 0\n")
    manifest = {
        "name": "toy",
        "root": ".",
        "classes": ["a", "b"],
        "splits": {"train": "train.txt", "test": [["img/3.png", 1], {"path": "img/4.png", "label": 0}]},
    }
    return tmp_path, manifest


def _write_manifest(root, manifest):
    path = root / "manifest.yaml"
    path.write_text(yaml.safe_dump(manifest, sort_keys=False))
    return path


def test_manifest_loading(image_tree):
    root, manifest = image_tree
    splits = load_image_dataset(_write_manifest(root, manifest))
    train, test = splits["train"], splits["test"]
    assert len(train) == 3 and len(test) == 2
    assert train.labels.tolist() == [0, 1, 0]
    assert train.images[0].max().item() == 1.0
    assert train.images[1].max().item() == 0.0
    assert train.images.min() >= 0 and train.images.max() <= 1
    assert test.ids.tolist() == [3, 4]
    again = load_image_dataset(_write_manifest(root, manifest))
    assert torch.equal(again["train"].images, train.images)


def test_manifest_missing_file_and_checksum(image_tree):
    root, manifest = image_tree
    bad = dict(manifest, splits={"train": [["img/missing.png", 0]]})
    with pytest.raises(DataError, match="missing"):
        load_image_dataset(_write_manifest(root, bad))
    digest = hashlib.sha256((root / "img/0.png").read_bytes()).hexdigest()
    ok = dict(manifest, checksums={"img/0.png": digest})
    load_image_dataset(_write_manifest(root, ok))
    wrong = dict(manifest, checksums={"img/0.png": "0" * 64})
    with pytest.raises(DataError, match="checksum"):
        load_image_dataset(_write_manifest(root, wrong))


def test_empty_manifest(tmp_path):
    (tmp_path / "m.yaml").write_text("")
    with pytest.raises(DataError):
        DatasetManifest.from_file(tmp_path / "m.yaml")
    with pytest.raises(DataError):
        DatasetManifest.from_dict({"splits": {}})


def test_cifar_batches(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.integers(0, 256, size=(5, 3072), dtype=np.uint8)
    data[0] = 255
    with open(tmp_path / "data_batch_1", "wb") as fh:
        pickle.dump({b"data": data, b"labels": [0, 1, 2, 3, 9]}, fh)
    manifest = {"format": "cifar10", "splits": {"train": ["data_batch_1"]}}
    ds = load_image_dataset(_write_manifest(tmp_path, manifest))["train"]
    assert ds.image_shape == (3, 32, 32)
    assert ds.labels.tolist() == [0, 1, 2, 3, 9]
    assert ds.images[0].min().item() == 1.0
    np.testing.assert_allclose(ds.images[1].numpy().reshape(-1), data[1] / 255.0, rtol=1e-6)


# -- attributes ---------------------------------------------------------------


def test_binarize_continuous():
    assert binarize_attributes(np.array([-1.0, 0.0, 35.2])).tolist() == [0, 0, 1]


@pytest.mark.parametrize(
    "text, match",
    [("1 0 1\n0 1\n", ":2:"), ("1 0\n0 x\n", ":2:.*non-numeric"), ("\n\n", "empty")],
)
def test_attribute_matrix_errors(tmp_path, text, match):
    path = tmp_path / "a.txt"
    path.write_text(text)
    with pytest.raises(DataError, match=match):
        read_attribute_matrix(path)


def test_per_image_attributes(image_tree):
    root, manifest = image_tree
    (root / "attrs.txt").write_text("1 0\n0 1\n2.5 -3\n0 0\n-1 7\n")
    m = dict(manifest, attributes={"file": "attrs.txt", "granularity": "per-image", "names": ["x", "y"]})
    splits = load_attribute_dataset(_write_manifest(root, m), num_concepts=2)
    assert splits["train"].attributes.tolist() == [[1, 0], [0, 1], [1, 0]]
    assert splits["test"].attributes.tolist() == [[0, 0], [0, 1]]
    assert splits["train"].attribute_names == ["x", "y"]
    for ds in splits.values():
        assert set(ds.attributes.unique().tolist()) <= {0.0, 1.0}


def test_per_class_attributes_broadcast(image_tree):
    root, manifest = image_tree
    (root / "cls.txt").write_text("-1 0 35.2\n4 4 0\n")
    m = dict(manifest, attributes={"file": "cls.txt", "granularity": "per-class"})
    splits = load_attribute_dataset(_write_manifest(root, m))
    assert splits["train"].attributes.tolist() == [[0, 0, 1], [1, 1, 0], [0, 0, 1]]


def test_attribute_row_count_mismatch(image_tree):
    root, manifest = image_tree
    (root / "attrs.txt").write_text("1 0\n0 1\n")
    m = dict(manifest, attributes={"file": "attrs.txt"})
    with pytest.raises(DataError, match="2 attribute rows for 5 samples"):
        load_attribute_dataset(_write_manifest(root, m))


def test_attribute_width_mismatch(image_tree):
    root, manifest = image_tree
    (root / "attrs.txt").write_text("1 0\n" * 5)
    m = dict(manifest, attributes={"file": "attrs.txt"})
    with pytest.raises(DataError, match="num_concepts"):
        load_attribute_dataset(_write_manifest(root, m), num_concepts=3)
