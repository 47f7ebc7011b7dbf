"""Feature extractors.

Every backbone maps an image batch to ``(features, activations)`` where
``features`` is the pooled ``(B, feature_dim)`` vector and
``activations`` the ``(B, C', H', W')`` output of the last convolutional
block (used by Grad-CAM).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

FAMILIES = ("tinycnn", "resnet_cifar", "wrn", "resnet18")
SUPPORTED_INPUT_SIZES = (32, 64)


@dataclass
class BackboneSpec:
    family: str = "tinycnn"
    depth: int = 32
    width: int = 2
    input_size: int = 32
    dropout: float = 0.0

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown backbone family {self.family!r}; expected one of {FAMILIES}")
        if self.input_size not in SUPPORTED_INPUT_SIZES:
            raise ValueError(f"unsupported input size {self.input_size} for {self.family}")
        if self.family == "resnet_cifar" and (self.depth - 2) % 6:
            raise ValueError(f"CIFAR ResNet depth must be 6n+2, got {self.depth}")
        if self.family == "wrn" and (self.depth - 4) % 6:
            raise ValueError(f"WRN depth must be 6n+4, got {self.depth}")
        if self.family == "wrn" and self.width < 1:
            raise ValueError("WRN width must be >= 1")


class TinyCNN(nn.Module):
    """Three conv blocks; small enough for CPU smoke runs.

    The last activations are average-pooled over a 4x4 grid rather than
    globally, so the feature vector still knows which quadrant a pattern
    came from (a shallow net has too small a receptive field otherwise).
    """

    def __init__(self, channels=(32, 64, 64), grid=4):
        super().__init__()
        c1, c2, c3 = channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1, bias=False), nn.BatchNorm2d(c1), nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(c2), nn.ReLU(inplace=True),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(c3), nn.ReLU(inplace=True),
        )
        self.pool = nn.AdaptiveAvgPool2d(grid)
        self.feature_dim = c3 * grid * grid

    def forward(self, x):
        act = self.features(x)
        return self.pool(act).flatten(1), act


class _ShortcutA(nn.Module):
    # parameter-free shortcut: subsample spatially, zero-pad channels
    def __init__(self, planes):
        super().__init__()
        self.pad = planes // 4

    def forward(self, x):
        return F.pad(x[:, :, ::2, ::2], (0, 0, 0, 0, self.pad, self.pad))


class _CifarBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = _ShortcutA(planes) if stride != 1 or in_planes != planes else nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetCifar(nn.Module):
    """The 6n+2 CIFAR ResNet (16/32/64 channels, identity shortcuts)."""

    def __init__(self, depth=32):
        super().__init__()
        n = (depth - 2) // 6
        self.conv1 = nn.Conv2d(3, 16, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        layers, in_planes = [], 16
        for planes, stride in ((16, 1), (32, 2), (64, 2)):
            for i in range(n):
                layers.append(_CifarBlock(in_planes, planes, stride if i == 0 else 1))
                in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.feature_dim = 64
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight)

    def forward(self, x):
        act = self.layers(F.relu(self.bn1(self.conv1(x))))
        return act.mean(dim=(2, 3)), act


class _WideBlock(nn.Module):
    def __init__(self, in_planes, planes, stride, dropout):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.dropout = dropout
        self.equal = in_planes == planes and stride == 1
        self.shortcut = None if self.equal else nn.Conv2d(in_planes, planes, 1, stride, 0, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        y = self.conv1(o)
        y = F.relu(self.bn2(y))
        if self.dropout > 0:
            y = F.dropout(y, p=self.dropout, training=self.training)
        y = self.conv2(y)
        return y + (x if self.equal else self.shortcut(o))


class WideResNet(nn.Module):
    """Pre-activation WRN-depth-width."""

    def __init__(self, depth=40, width=2, dropout=0.0):
        super().__init__()
        n = (depth - 4) // 6
        widths = [16, 16 * width, 32 * width, 64 * width]
        self.conv1 = nn.Conv2d(3, widths[0], 3, 1, 1, bias=False)
        blocks, in_planes = [], widths[0]
        for planes, stride in zip(widths[1:], (1, 2, 2)):
            for i in range(n):
                blocks.append(_WideBlock(in_planes, planes, stride if i == 0 else 1, dropout))
                in_planes = planes
        self.blocks = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(in_planes)
        self.feature_dim = in_planes
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        act = F.relu(self.bn(self.blocks(self.conv1(x))))
        return act.mean(dim=(2, 3)), act


class _BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Identity()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(nn.Conv2d(in_planes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """ResNet-18 with a 3x3 stem and no max-pool (Tiny-ImageNet recipe)."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 64, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        layers, in_planes = [], 64
        for planes, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
            layers += [_BasicBlock(in_planes, planes, stride), _BasicBlock(planes, planes, 1)]
            in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.feature_dim = 512

    def forward(self, x):
        act = self.layers(F.relu(self.bn1(self.conv1(x))))
        return act.mean(dim=(2, 3)), act


def build_backbone(spec: BackboneSpec, seed: int | None = None) -> nn.Module:
    """Instantiate the backbone; with ``seed`` the initial weights are reproducible."""
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        if spec.family == "tinycnn":
            return TinyCNN()
        if spec.family == "resnet_cifar":
            return ResNetCifar(spec.depth)
        if spec.family == "wrn":
            return WideResNet(spec.depth, spec.width, spec.dropout)
        return ResNet18()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
