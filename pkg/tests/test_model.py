import pytest
import torch

from antehoc.errors import CheckpointError, ConfigError, InputError, UnsupportedOperationError
from antehoc.model import (
    ModelConfig,
    build_model,
    extract_concepts,
    forward_full,
    forward_task,
    load_checkpoint,
    parameter_counts,
    predict,
    predict_from_concepts,
    read_checkpoint,
    reconstruct,
    save_checkpoint,
)

from conftest import tiny_config

CIFAR_SHAPE = (3, 32, 32)


def _x(n=4, shape=CIFAR_SHAPE, seed=0):
    return torch.rand(n, *shape, generator=torch.Generator().manual_seed(seed))


@pytest.fixture(scope="module")
def cifar_model():
    return build_model(ModelConfig(image_shape=CIFAR_SHAPE, num_classes=4, num_concepts=6))


def _perturb(module):
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn_like(p))


# -- parameter accounting -----------------------------------------------------


def test_concept_encoder_count_over_512_features():
    m = build_model(ModelConfig(image_shape=(1, 8, 8), num_classes=10, num_concepts=85, backbone="flat-512"))
    assert m.feature_dim == 512
    assert parameter_counts(m).concept_encoder == 512 * 85 + 85 == 43_605


def test_concept_classifier_count():
    m = build_model(tiny_config(num_classes=10, num_concepts=10))
    assert parameter_counts(m).concept_classifier == 110


def test_counts_without_decoder():
    cfg = dict(image_shape=CIFAR_SHAPE, num_classes=4, num_concepts=6)
    with_dec = parameter_counts(build_model(ModelConfig(**cfg)))
    without = parameter_counts(build_model(ModelConfig(**cfg, use_decoder=False)))
    assert without.decoder == 0
    assert with_dec.total == sum(v for k, v in with_dec.as_dict().items() if k != "total")
    assert with_dec.total - without.total == with_dec.decoder > 0
    for name in ("feature_encoder", "task_head", "concept_encoder", "concept_classifier"):
        assert getattr(with_dec, name) == getattr(without, name)


def test_decoder_does_not_shift_other_initialisations():
    a = build_model(tiny_config(image_shape=(1, 8, 8), use_decoder=True))
    b = build_model(tiny_config(image_shape=(1, 8, 8), use_decoder=False))
    x = _x(3, (1, 8, 8))
    assert torch.equal(forward_task(a, x), forward_task(b, x))
    assert torch.equal(extract_concepts(a, x), extract_concepts(b, x))


# -- decoupling ---------------------------------------------------------------


@pytest.mark.parametrize("component", ["decoder", "concept_encoder", "concept_classifier"])
def test_task_path_ignores_concept_branch(component):
    m = build_model(ModelConfig(image_shape=CIFAR_SHAPE, num_classes=4, num_concepts=6))
    x = _x()
    before = forward_task(m, x)
    _perturb(m.component(component))
    assert torch.equal(before, forward_task(m, x))


def test_concepts_ignore_decoder(cifar_model):
    x = _x()
    before = extract_concepts(cifar_model, x)
    m = build_model(cifar_model.config)
    m.load_state_dict(cifar_model.state_dict())
    _perturb(m.decoder)
    assert torch.equal(before, extract_concepts(m, x))


def test_concept_path_never_calls_decoder(cifar_model):
    x = _x()
    start = cifar_model.decoder.calls
    c = extract_concepts(cifar_model, x)
    predict_from_concepts(cifar_model, c)
    forward_task(cifar_model, x)
    predict(cifar_model, x)
    assert cifar_model.decoder.calls == start
    reconstruct(cifar_model, x)
    assert cifar_model.decoder.calls == start + 1


# -- shapes and consistency ---------------------------------------------------


def test_shapes(cifar_model):
    x = _x(5)
    assert forward_task(cifar_model, x).shape == (5, 4)
    assert extract_concepts(cifar_model, x).shape == (5, 6)
    assert reconstruct(cifar_model, x).shape == x.shape
    bundle = forward_full(cifar_model, x)
    assert bundle.surrogate_logits.shape == (5, 4)


def test_ten_concepts_shape():
    m = build_model(tiny_config(num_concepts=10))
    assert extract_concepts(m, _x(7, (1, 8, 8))).shape == (7, 10)


def test_forward_full_consistency(cifar_model):
    x = _x()
    bundle = forward_full(cifar_model, x)
    assert torch.equal(bundle.task_logits, forward_task(cifar_model, x))
    assert torch.equal(bundle.concepts, extract_concepts(cifar_model, x))
    assert torch.equal(bundle.surrogate_logits, predict_from_concepts(cifar_model, bundle.concepts))
    assert torch.equal(bundle.reconstruction, reconstruct(cifar_model, x))


def test_no_decoder_bundle_and_reconstruct_error():
    m = build_model(tiny_config(use_decoder=False))
    x = _x(2, (1, 8, 8))
    assert forward_full(m, x).reconstruction is None
    with pytest.raises(UnsupportedOperationError):
        reconstruct(m, x)


def test_zero_concept_encoder_gives_zero_concepts():
    m = build_model(tiny_config(concept_activation="identity"))
    with torch.no_grad():
        m.concept_encoder.weight.zero_()
        m.concept_encoder.bias.zero_()
    assert torch.equal(extract_concepts(m, _x(3, (1, 8, 8))), torch.zeros(3, 4))


def test_sigmoid_concepts_are_squashed_encoder_outputs():
    m = build_model(tiny_config())
    with torch.no_grad():
        m.concept_encoder.weight.zero_()
        m.concept_encoder.bias.zero_()
    assert torch.equal(extract_concepts(m, _x(3, (1, 8, 8))), torch.full((3, 4), 0.5))


def test_zero_concepts_give_classifier_bias(tiny_model):
    out = predict_from_concepts(tiny_model, torch.zeros(2, 4))
    assert torch.equal(out, tiny_model.concept_classifier.bias.detach().expand(2, -1))
    c = torch.rand(1, 4).repeat(2, 1)
    out = predict_from_concepts(tiny_model, c)
    assert torch.equal(out[0], out[1])


def test_decoder_deterministic_and_bounded(cifar_model):
    x = _x()
    r1, r2 = reconstruct(cifar_model, x), reconstruct(cifar_model, x)
    assert torch.equal(r1, r2)
    assert r1.min() >= 0 and r1.max() <= 1


def test_eval_mode_restored(cifar_model):
    cifar_model.train()
    forward_task(cifar_model, _x())
    assert cifar_model.training
    cifar_model.eval()


def test_wrong_input_shapes(tiny_model):
    with pytest.raises(InputError):
        forward_task(tiny_model, torch.rand(2, 3, 8, 8))
    with pytest.raises(InputError):
        predict_from_concepts(tiny_model, torch.rand(2, 5))


def test_bottleneck_mode_reports_surrogate():
    m = build_model(tiny_config(bottleneck_mode=True))
    x = _x(3, (1, 8, 8))
    assert torch.equal(predict(m, x), predict_from_concepts(m, extract_concepts(m, x)))
    assert not any(p.requires_grad for p in m.task_head.parameters())


@pytest.mark.parametrize(
    "kw",
    [
        dict(num_concepts=0),
        dict(num_classes=1),
        dict(omega=1.5),
        dict(backbone="nope"),
        dict(loss_weights={"fidelity": -1}),
        dict(loss_weights={"concept": 1.0}),  # concept supervision without supervised mode
        dict(concept_activation="tanh"),
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        build_model(tiny_config(**kw))


def test_incompatible_backbone_geometry():
    with pytest.raises(ConfigError):
        build_model(ModelConfig(image_shape=(1, 8, 8), num_classes=2, num_concepts=2, backbone="resnet18"))


def test_supervised_gamma_default():
    assert tiny_config(supervision_mode="supervised").loss_weights.concept == 1.0
    assert tiny_config().loss_weights.concept == 0.0


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, cifar_model):
    path = save_checkpoint(cifar_model, tmp_path / "m.pt", metadata={"note": "x"})
    loaded = load_checkpoint(path)
    x = _x()
    assert torch.equal(forward_task(cifar_model, x), forward_task(loaded, x))
    assert torch.equal(reconstruct(cifar_model, x), reconstruct(loaded, x))
    payload = read_checkpoint(path)
    assert payload["config"] == cifar_model.config
    assert payload["config"].seed == cifar_model.config.seed
    assert payload["metadata"] == {"note": "x"}


def test_checkpoint_concept_mismatch(tmp_path, cifar_model):
    path = save_checkpoint(cifar_model, tmp_path / "m.pt")
    with pytest.raises(CheckpointError, match="num_concepts"):
        load_checkpoint(path, expect={"num_concepts": 10})


def test_checkpoint_corrupt_and_missing(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")


@pytest.mark.parametrize("name, dim", [("resnet18", 512), ("densenet121", 1024)])
def test_torchvision_adapters_discover_feature_dim(name, dim):
    m = build_model(ModelConfig(image_shape=CIFAR_SHAPE, num_classes=10, num_concepts=5, backbone=name, use_decoder=False))
    assert m.feature_dim == dim
    assert forward_task(m, _x(2)).shape == (2, 10)


def test_weights_hook_runs_before_use():
    seen = []
    build_model(tiny_config(), weights_hook=lambda net: seen.append(type(net).__name__))
    assert seen == ["TinyMLP"]
