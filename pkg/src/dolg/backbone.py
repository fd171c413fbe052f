"""Feature trunks exposing the stage-3 and stage-4 maps (f3, f4).

Two families are provided:

* ``toy-cnn``: a stem plus four strided conv stages, small enough to train
  on a laptop CPU.
* ``resnet50-like`` / ``resnet101-like``: the torchvision ResNet topology,
  cut after ``layer3`` (f3) and ``layer4`` (f4). Structural only; weights
  can be loaded from a named-tensor manifest.

All strided layers use ``padding = kernel // 2`` with stride 2, which
gives ceiling division of spatial sizes.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, InvalidInputError
from .tensorio import load_into, read_tensors

VARIANTS = ("toy-cnn", "resnet50-like", "resnet101-like")


@dataclass(frozen=True)
class BackboneSpec:
    variant: str = "toy-cnn"
    stage3_channels: int = 64
    stage4_channels: int = 128
    stage3_stride: int = 16
    stage4_stride: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown backbone variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("stage3_channels", "stage4_channels", "stage3_stride", "stage4_stride"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"backbone.{name} must be positive")
        if self.stage4_stride != 2 * self.stage3_stride:
            raise ConfigError("stage4_stride must equal 2 * stage3_stride")
        if self.variant != "toy-cnn":
            if (self.stage3_channels, self.stage4_channels, self.stage3_stride) != (1024, 2048, 16):
                raise ConfigError(f"{self.variant} requires C3=1024, C4=2048, stride3=16")
        elif self.stage3_stride not in (8, 16):
            raise ConfigError("toy-cnn supports stage3_stride of 8 or 16")

    @classmethod
    def resnet50(cls):
        return cls("resnet50-like", 1024, 2048, 16, 32)

    @classmethod
    def resnet101(cls):
        return cls("resnet101-like", 1024, 2048, 16, 32)


def conv_bn_relu(cin, cout, stride=1, kernel=3):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ToyCNN(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        c3, c4 = spec.stage3_channels, spec.stage4_channels
        widths = (max(c3 // 4, 8), max(c3 // 2, 8), c3, c4)
        stem_stride = 2 if spec.stage3_stride == 16 else 1
        self.stem = conv_bn_relu(3, widths[0], stride=stem_stride)
        self.stage1 = conv_bn_relu(widths[0], widths[0], stride=2)
        self.stage2 = nn.Sequential(conv_bn_relu(widths[0], widths[1], stride=2),
                                    conv_bn_relu(widths[1], widths[1]))
        self.stage3 = nn.Sequential(conv_bn_relu(widths[1], widths[2], stride=2),
                                    conv_bn_relu(widths[2], widths[2]))
        self.stage4 = nn.Sequential(conv_bn_relu(widths[2], widths[3], stride=2),
                                    conv_bn_relu(widths[3], widths[3]))

    def trunk3(self):
        return [self.stem, self.stage1, self.stage2, self.stage3]

    def forward(self, x):
        for block in self.trunk3():
            x = block(x)
        return x, self.stage4(x)


class ResNetLike(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        from torchvision.models import resnet50, resnet101

        net = (resnet50 if spec.variant == "resnet50-like" else resnet101)(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4

    def trunk3(self):
        return [self.stem, self.layer1, self.layer2, self.layer3]

    def forward(self, x):
        for block in self.trunk3():
            x = block(x)
        return x, self.layer4(x)


class Backbone(nn.Module):
    """Wraps a trunk and validates inputs. ``forward`` returns ``(f3, f4)``."""

    def __init__(self, spec: BackboneSpec, freeze_bn=False):
        super().__init__()
        self.spec = spec
        self.freeze_bn = freeze_bn
        self.body = ToyCNN(spec) if spec.variant == "toy-cnn" else ResNetLike(spec)
        if freeze_bn:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d):
                    for p in m.parameters():
                        p.requires_grad_(False)

    def train(self, mode=True):
        super().train(mode)
        if self.freeze_bn:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.eval()
        return self

    def forward(self, images):
        if images.dim() != 4 or images.shape[1] != 3:
            raise InvalidInputError(f"expected images of shape (B, 3, H, W), got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        stride = self.spec.stage4_stride
        if h < stride:
            raise InvalidInputError(f"image height {h} is smaller than the stage-4 stride {stride}")
        if w < stride:
            raise InvalidInputError(f"image width {w} is smaller than the stage-4 stride {stride}")
        return self.body(images)

    def load_weights(self, path, strict=False):
        tensors, _ = read_tensors(path)
        prefix = "body."
        tensors = {k[len(prefix):] if k.startswith(prefix) else k: v for k, v in tensors.items()}
        return load_into(self.body, tensors, strict=strict)


def expected_shape(spec: BackboneSpec, height, width):
    """Shapes of (f3, f4) for an input of the given size, as (C, H, W) tuples."""
    def ceil_div(a, b):
        return -(-a // b)

    return ((spec.stage3_channels, ceil_div(height, spec.stage3_stride), ceil_div(width, spec.stage3_stride)),
            (spec.stage4_channels, ceil_div(height, spec.stage4_stride), ceil_div(width, spec.stage4_stride)))
