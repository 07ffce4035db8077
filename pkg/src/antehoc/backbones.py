"""Feature-encoder registry.

Every backbone maps an image batch ``(B, *image_shape)`` to a pooled feature
matrix ``(B, feature_dim)``. The feature dimension is discovered with a dry
forward pass rather than stored per entry.
"""
from __future__ import annotations

from typing import Callable, Optional

import torch
from torch import nn

from .errors import ConfigError

ImageShape = tuple[int, int, int]
BackboneFactory = Callable[[ImageShape], nn.Module]
WeightsHook = Callable[[nn.Module], None]


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with an identity (or 1x1 projected) shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut: nn.Module = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class CompactResNet(nn.Module):
    """Small residual CNN for 32x32-scale inputs (one basic block per stage)."""

    def __init__(self, in_channels: int, widths: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        prev = widths[0]
        for i, w in enumerate(widths):
            stages.append(BasicBlock(prev, w, stride=1 if i == 0 else 2))
            prev = w
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.stages(self.stem(x))), 1)


class TinyMLP(nn.Module):
    """Flatten + one affine layer + tanh. Used for gradient checks."""

    def __init__(self, in_features: int, width: int = 8):
        super().__init__()
        self.fc = nn.Linear(in_features, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.fc(torch.flatten(x, 1)))


def _compact(image_shape: ImageShape) -> nn.Module:
    c, h, w = image_shape
    if h < 8 or w < 8 or h % 4 or w % 4:
        raise ConfigError(
            f"resnet18-class backbone needs H, W >= 8 and divisible by 4, got {h}x{w}"
        )
    return CompactResNet(c)


def _tiny(image_shape: ImageShape) -> nn.Module:
    c, h, w = image_shape
    return TinyMLP(c * h * w)


def _torchvision(name: str) -> BackboneFactory:
    def factory(image_shape: ImageShape) -> nn.Module:
        import torchvision.models as tvm

        c, h, w = image_shape
        if c != 3 or h < 32 or w < 32:
            raise ConfigError(
                f"{name} adapter expects 3-channel images of at least 32x32 "
                f"(224x224 nominal), got {image_shape}"
            )
        net = getattr(tvm, name)(weights=None)
        # Strip the classifier so the module emits pooled features.
        if hasattr(net, "fc"):
            net.fc = nn.Identity()
        elif hasattr(net, "classifier"):
            net.classifier = nn.Identity()
        return net

    return factory


BACKBONES: dict[str, BackboneFactory] = {
    "resnet18-class": _compact,
    "tiny-mlp": _tiny,
    "resnet18": _torchvision("resnet18"),
    "resnet34": _torchvision("resnet34"),
    "resnet50": _torchvision("resnet50"),
    "densenet121": _torchvision("densenet121"),
    "efficientnet_b0": _torchvision("efficientnet_b0"),
}


def register_backbone(name: str, factory: BackboneFactory) -> None:
    if name in BACKBONES:
        raise ConfigError(f"backbone {name!r} already registered")
    BACKBONES[name] = factory


def build_backbone(
    name: str, image_shape: ImageShape, weights_hook: Optional[WeightsHook] = None
) -> tuple[nn.Module, int]:
    """Instantiate a registered backbone and return ``(module, feature_dim)``.

    ``weights_hook`` receives the freshly built module and may load pretrained
    weights into it; nothing is downloaded by this package.
    """
    try:
        factory = BACKBONES[name]
    except KeyError:
        raise ConfigError(
            f"unknown backbone {name!r}; registered: {sorted(BACKBONES)}"
        ) from None
    net = factory(tuple(image_shape))
    if weights_hook is not None:
        weights_hook(net)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        try:
            out = net(torch.zeros(1, *image_shape))
        except RuntimeError as exc:
            raise ConfigError(
                f"image shape {tuple(image_shape)} incompatible with backbone {name!r}: {exc}"
            ) from exc
    net.train(was_training)
    if out.dim() != 2:
        raise ConfigError(f"backbone {name!r} must emit (B, D) features, got {tuple(out.shape)}")
    return net, int(out.shape[1])
