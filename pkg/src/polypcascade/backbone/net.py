"""Trainable residual classifiers."""

from __future__ import annotations

import torch
from torch import nn

# ImageNet channel statistics
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)


def conv_bn(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + x)


class SmallResNet(nn.Module):
    """Four stride-2 stages, two residual blocks, global average pooling.

    The pooling makes the head independent of the input side, so the same
    network serves 224 px inputs and full-resolution crops alike.  Inputs
    must be at least ``MIN_SIDE`` pixels.
    """

    MIN_SIDE = 32

    def __init__(self, n_classes: int, width: int = 16):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            conv_bn(3, w, 2),
            conv_bn(w, 2 * w, 2),
            conv_bn(2 * w, 3 * w, 2),
            BasicBlock(3 * w),
            conv_bn(3 * w, 4 * w, 2),
            BasicBlock(4 * w),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(4 * w, n_classes)

    def forward(self, x):
        return self.fc(torch.flatten(self.pool(self.features(x)), 1))


class LinearProbe(nn.Module):
    """Linear head on the per-channel image means."""

    def __init__(self, n_classes: int):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(3, n_classes)

    def forward(self, x):
        return self.fc(torch.flatten(self.pool(x), 1))


ARCHS = ("small_resnet", "linear", "resnet18")


def build_network(arch: str, n_classes: int, pretrained: bool = False) -> nn.Module:
    if arch == "small_resnet":
        if pretrained:
            raise ValueError("small_resnet has no pretrained weights")
        return SmallResNet(n_classes)
    if pretrained and arch != "resnet18":
        raise ValueError(f"{arch} has no pretrained weights")
    if arch == "linear":
        return LinearProbe(n_classes)
    if arch == "resnet18":
        from torchvision.models import ResNet18_Weights, resnet18

        net = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1 if pretrained else None)
        net.fc = nn.Linear(net.fc.in_features, n_classes)
        return net
    raise ValueError(f"unknown architecture {arch!r}")


def min_side(arch: str) -> int:
    return {"small_resnet": SmallResNet.MIN_SIDE, "linear": 1}.get(arch, 32)


def to_tensor(images) -> torch.Tensor:
    """Stack uint8 HxWx3 arrays into a normalised NCHW float batch."""
    x = torch.stack([torch.from_numpy(im.copy()) for im in images])
    x = x.permute(0, 3, 1, 2).float().div_(255.0)
    mean = torch.tensor(MEAN).view(1, 3, 1, 1)
    std = torch.tensor(STD).view(1, 3, 1, 1)
    return (x - mean) / std
