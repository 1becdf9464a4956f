"""Reusable network blocks: conv unit, residual block, DRI block and the MFF block.

Feature maps are ``N×C×H×W`` tensors. Every block keeps the spatial size (stride 1,
zero "same" padding) except ``ConvBnAct`` with stride 2, which halves it.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
from pydantic import BaseModel, Field, model_validator

from depthseg.exceptions import ShapeMismatchError

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.1  # torch convention: running = 0.9 * running + 0.1 * batch

FeatureMap = torch.Tensor


class BlockConfig(BaseModel):
    kind: str = Field(pattern="^(conv|residual|dri)$")
    in_channels: int = Field(gt=0)
    out_channels: int = Field(gt=0)
    dilation_rates: Sequence[int] = (1, 2, 4)

    @model_validator(mode="after")
    def _check(self):
        if self.kind in ("residual", "dri") and self.in_channels != self.out_channels:
            raise ValueError(
                f"{self.kind} blocks need in_channels == out_channels, got {self.in_channels} -> {self.out_channels}"
            )
        if self.kind == "dri":
            rates = list(self.dilation_rates)
            if not rates:
                raise ValueError("DRI block needs at least one dilation rate")
            if any(b <= a for a, b in zip(rates, rates[1:])):
                raise ValueError(f"dilation rates must be strictly increasing, got {rates}")
        return self


def make_activation(kind: str) -> nn.Module:
    if kind == "leaky":
        return nn.LeakyReLU(LEAKY_SLOPE)
    if kind == "relu":
        return nn.ReLU()
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"Unknown activation '{kind}', expected leaky, relu or none")


def _check_channels(x: torch.Tensor, expected: int, where: str):
    if x.dim() != 4 or x.shape[1] != expected:
        raise ShapeMismatchError(f"{where} expects N×{expected}×H×W input, got {tuple(x.shape)}")


class ConvBnAct(nn.Module):
    """Convolution (or transposed convolution) → optional BN → activation."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        dilation: int = 1,
        activation: str = "leaky",
        norm: bool = True,
        transposed: bool = False,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        if transposed:
            # 4×4 / stride 2 / padding 1 doubles the spatial size
            self.conv = nn.ConvTranspose2d(
                in_channels, out_channels, kernel_size, stride=stride, padding=(kernel_size - stride) // 2, bias=not norm
            )
        else:
            if stride == 1:
                padding = dilation * (kernel_size - 1) // 2
            else:
                padding = (kernel_size - stride + 1) // 2
            self.conv = nn.Conv2d(
                in_channels, out_channels, kernel_size, stride=stride, padding=padding, dilation=dilation, bias=not norm
            )
        self.norm = nn.BatchNorm2d(out_channels, momentum=BN_MOMENTUM) if norm else nn.Identity()
        self.act = make_activation(activation)

    def forward(self, x: FeatureMap) -> FeatureMap:
        _check_channels(x, self.in_channels, type(self).__name__)
        return self.act(self.norm(self.conv(x)))


def conv_bn_act(x: FeatureMap, cfg: BlockConfig, stride: int = 1, activation: str = "leaky") -> FeatureMap:
    """Functional form: build the unit for ``cfg`` and apply it once."""
    if cfg.in_channels != x.shape[1]:
        raise ShapeMismatchError(f"cfg.in_channels={cfg.in_channels} but input has {x.shape[1]} channels")
    kernel = 4 if stride == 2 else 3
    unit = ConvBnAct(cfg.in_channels, cfg.out_channels, kernel, stride=stride, activation=activation).to(x)
    return unit(x)


class ResidualBlock(nn.Module):
    """x + F(x) with F = conv3×3-BN-act-conv3×3-BN (BN dropped when ``norm`` is false)."""

    def __init__(self, channels: int, activation: str = "leaky", norm: bool = True):
        super().__init__()
        self.channels = channels
        self.body = nn.Sequential(
            ConvBnAct(channels, channels, 3, activation=activation, norm=norm),
            ConvBnAct(channels, channels, 3, activation="none", norm=norm),
        )

    def forward(self, x: FeatureMap) -> FeatureMap:
        _check_channels(x, self.channels, "ResidualBlock")
        return x + self.body(x)


class DRIBlock(nn.Module):
    """Dilated residual inception block.

    Parallel branches (one 1×1 plus one 3×3 per dilation rate), concatenated, projected
    back by a 1×1 conv and added to the shortcut.
    """

    def __init__(
        self, channels: int, dilation_rates: Sequence[int] = (1, 2, 4), activation: str = "leaky", norm: bool = True
    ):
        super().__init__()
        rates = list(dilation_rates)
        if not rates:
            raise ValueError("DRI block needs at least one dilation rate")
        self.channels = channels
        self.dilation_rates = tuple(rates)
        width = max(1, channels // (len(rates) + 1))
        branches = [ConvBnAct(channels, width, 1, activation=activation, norm=norm)]
        branches += [ConvBnAct(channels, width, 3, dilation=rate, activation=activation, norm=norm) for rate in rates]
        self.branches = nn.ModuleList(branches)
        self.project = ConvBnAct(width * len(branches), channels, 1, activation="none", norm=norm)

    def forward(self, x: FeatureMap) -> FeatureMap:
        _check_channels(x, self.channels, "DRIBlock")
        features = torch.cat([branch(x) for branch in self.branches], dim=1)
        return x + self.project(features)


def residual_block(x: FeatureMap, block: Optional[ResidualBlock] = None) -> FeatureMap:
    block = block if block is not None else ResidualBlock(x.shape[1]).to(x)
    return block(x)


def dri_block(x: FeatureMap, dilation_rates: Sequence[int] = (1, 2, 4), block: Optional[DRIBlock] = None) -> FeatureMap:
    block = block if block is not None else DRIBlock(x.shape[1], dilation_rates).to(x)
    return block(x)


def make_block(kind, channels, activation="leaky", dilation_rates=(1, 2, 4), norm=True) -> nn.Module:
    if kind == "residual":
        return ResidualBlock(channels, activation, norm)
    if kind == "dri":
        return DRIBlock(channels, dilation_rates, activation, norm)
    if kind == "conv":
        return ConvBnAct(channels, channels, 3, activation=activation, norm=norm)
    raise ValueError(f"Unknown block kind '{kind}', expected conv, residual or dri")


def block_from_config(cfg: BlockConfig, activation: str = "leaky") -> nn.Module:
    if cfg.kind == "conv":
        return ConvBnAct(cfg.in_channels, cfg.out_channels, 3, activation=activation)
    return make_block(cfg.kind, cfg.in_channels, activation, cfg.dilation_rates)


class MFFBlock(nn.Module):
    """Multimodal feature fusion: two blocks per branch, element-wise sum, 3×3 conv-BN-ReLU."""

    def __init__(self, channels: int, block_kind: str = "dri", dilation_rates: Sequence[int] = (1, 2, 4)):
        super().__init__()
        self.channels = channels
        self.image_branch = nn.Sequential(
            make_block(block_kind, channels, "leaky", dilation_rates),
            make_block(block_kind, channels, "leaky", dilation_rates),
        )
        self.guide_branch = nn.Sequential(
            make_block(block_kind, channels, "leaky", dilation_rates),
            make_block(block_kind, channels, "leaky", dilation_rates),
        )
        self.fuse = ConvBnAct(channels, channels, 3, activation="relu")

    def forward(self, img_feat: FeatureMap, guide_feat: FeatureMap) -> FeatureMap:
        if img_feat.shape != guide_feat.shape:
            raise ShapeMismatchError(
                f"MFF inputs must have identical shapes, got {tuple(img_feat.shape)} and {tuple(guide_feat.shape)}"
            )
        return self.fuse(self.image_branch(img_feat) + self.guide_branch(guide_feat))


def mff_block(img_feat: FeatureMap, guide_feat: FeatureMap, block_kind: str = "dri", block: Optional[MFFBlock] = None) -> FeatureMap:
    block = block if block is not None else MFFBlock(img_feat.shape[1], block_kind).to(img_feat)
    return block(img_feat, guide_feat)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def inception_parameter_count(channels: int, kernel_sizes: Sequence[int] = (1, 3, 5, 7)) -> int:
    """Parameters of an equal-width inception block built like ``DRIBlock`` (conv + BN per branch, 1×1 projection)."""
    width = max(1, channels // len(kernel_sizes))
    branches = sum(channels * width * k * k + 2 * width for k in kernel_sizes)
    projection = width * len(kernel_sizes) * channels + 2 * channels
    return branches + projection
