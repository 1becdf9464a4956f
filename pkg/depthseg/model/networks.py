"""Encoder-decoder networks: the depth estimator and the depth-guided segmenter."""

from __future__ import annotations

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from depthseg.exceptions import ShapeMismatchError
from depthseg.model.nn_core import ConvBnAct, MFFBlock, make_block
from depthseg.schemas.config_schema import GuidedConfig, NetworkConfig
from depthseg.schemas.sample_schema import NUM_CLASSES, DepthMap, FundusImage, ProbabilityMap

logger = logging.getLogger("depthseg")


class EncoderLevel(nn.Module):
    """4×4 stride-2 conv → BN → LeakyReLU(0.2) → special block.

    The innermost level of the main encoder has no BN, in its block too: at the default
    resolution it is 1×1 and must train with batches of one.
    """

    def __init__(self, in_channels: int, out_channels: int, block_kind: str, dilation_rates, innermost: bool = False):
        super().__init__()
        self.down = ConvBnAct(in_channels, out_channels, 4, stride=2, activation="leaky", norm=not innermost)
        self.block = make_block(block_kind, out_channels, "leaky", dilation_rates, norm=not innermost)

    def forward(self, x):
        return self.block(self.down(x))


class DecoderLevel(nn.Module):
    """4×4 stride-2 deconv → BN → ReLU → optional dropout → special block."""

    def __init__(self, in_channels: int, out_channels: int, block_kind: str, dilation_rates, dropout: float = 0.0):
        super().__init__()
        self.up = ConvBnAct(in_channels, out_channels, 4, stride=2, activation="relu", transposed=True)
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self.block = make_block(block_kind, out_channels, "relu", dilation_rates)

    @property
    def has_dropout(self) -> bool:
        return isinstance(self.dropout, nn.Dropout)

    def forward(self, x):
        return self.block(self.dropout(self.up(x)))


class EncoderDecoderNet(nn.Module):
    """U-Net style encoder-decoder with an optional guide encoder fused into the main branch.

    ``forward`` returns pre-activation head outputs; ``activate`` applies the head
    activation (tanh or channel softmax).
    """

    def __init__(self, cfg: NetworkConfig, guided: Optional[GuidedConfig] = None):
        super().__init__()
        self.cfg = cfg
        self.guided_cfg = guided if guided is not None and guided.enabled else None
        filters = cfg.filter_schedule()
        levels = cfg.encoder_levels
        self.encoder_filters = filters

        self.encoder = nn.ModuleList(
            EncoderLevel(
                cfg.in_channels if level == 0 else filters[level - 1],
                filters[level],
                cfg.block_kind,
                cfg.dilation_rates,
                innermost=(level == levels - 1),
            )
            for level in range(levels)
        )

        decoder = []
        for position, level in enumerate(range(levels - 1, -1, -1)):
            in_channels = filters[level] if level == levels - 1 else 2 * filters[level]
            out_channels = filters[level - 1] if level > 0 else cfg.base_filters
            dropout = cfg.dropout_rate if position < cfg.dropout_levels else 0.0
            decoder.append(DecoderLevel(in_channels, out_channels, cfg.block_kind, cfg.dilation_rates, dropout))
        self.decoder = nn.ModuleList(decoder)
        self.head = nn.Conv2d(cfg.base_filters, cfg.out_channels, kernel_size=1)
        self.head_activation = nn.Tanh() if cfg.output_activation == "tanh" else nn.Softmax(dim=1)

        self.guide_encoder = nn.ModuleList()
        self.fusion = nn.ModuleDict()
        if self.guided_cfg is not None:
            gcfg = self.guided_cfg
            if gcfg.main_levels != levels:
                raise ValueError(
                    f"guided main_levels={gcfg.main_levels} does not match network encoder_levels={levels}"
                )
            for level in range(gcfg.guide_levels):
                self.guide_encoder.append(
                    EncoderLevel(
                        gcfg.guide_channels if level == 0 else filters[level - 1],
                        filters[level],
                        cfg.block_kind,
                        cfg.dilation_rates,
                    )
                )
            for level in gcfg.fusion_levels:
                self.fusion[str(level)] = MFFBlock(filters[level - 1], cfg.block_kind, cfg.dilation_rates)

    # introspection

    @property
    def output_activation(self) -> str:
        return self.cfg.output_activation

    @property
    def is_guided(self) -> bool:
        return self.guided_cfg is not None

    @property
    def main_level_count(self) -> int:
        return len(self.encoder)

    @property
    def guide_level_count(self) -> int:
        return len(self.guide_encoder)

    @property
    def fusion_points(self) -> List[int]:
        return sorted(int(level) for level in self.fusion.keys())

    def dropout_decoder_levels(self) -> List[int]:
        """Positions (0 = innermost decoder level) that apply dropout."""
        return [position for position, level in enumerate(self.decoder) if level.has_dropout]

    def guide_parameters(self):
        for module in list(self.guide_encoder) + [fusion.guide_branch for fusion in self.fusion.values()]:
            yield from module.parameters()

    def _check_input(self, x: torch.Tensor, guide: Optional[torch.Tensor]):
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeMismatchError(f"expected N×{self.cfg.in_channels}×H×W input, got {tuple(x.shape)}")
        factor = 2 ** self.cfg.encoder_levels
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeMismatchError(f"input {x.shape[2]}×{x.shape[3]} is not divisible by 2^{self.cfg.encoder_levels}")
        if self.is_guided:
            if guide is None:
                raise ValueError("guided network needs a guide image")
            expected = (x.shape[0], self.guided_cfg.guide_channels, x.shape[2], x.shape[3])
            if tuple(guide.shape) != expected:
                raise ShapeMismatchError(f"guide shape {tuple(guide.shape)} does not match expected {expected}")

    def forward(self, x: torch.Tensor, guide: Optional[torch.Tensor] = None) -> torch.Tensor:
        self._check_input(x, guide)
        skips = []
        h, g = x, guide
        for index, level in enumerate(self.encoder):
            h = level(h)
            if self.is_guided and index < len(self.guide_encoder):
                g = self.guide_encoder[index](g)
                key = str(index + 1)
                if key in self.fusion:
                    # fused features feed both the skip and the next main level
                    h = self.fusion[key](h, g)
            skips.append(h)

        h = skips[-1]
        last = len(self.encoder) - 1
        for position, level in enumerate(self.decoder):
            h = level(h)
            skip_index = last - position - 1
            if skip_index >= 0:
                h = torch.cat([h, skips[skip_index]], dim=1)
        return self.head(h)

    def activate(self, out: torch.Tensor) -> torch.Tensor:
        return self.head_activation(out)


def build_depth_net(cfg: NetworkConfig, seed: Optional[int] = None) -> EncoderDecoderNet:
    if cfg.output_activation != "tanh":
        cfg = cfg.model_copy(update={"output_activation": "tanh"})
    if seed is not None:
        torch.manual_seed(seed)
    model = EncoderDecoderNet(cfg)
    logger.info(
        f"Built depth net: {cfg.encoder_levels} levels, filters {cfg.filter_schedule()}, "
        f"block={cfg.block_kind}, {sum(p.numel() for p in model.parameters())} parameters"
    )
    return model


def build_guided_seg_net(cfg: NetworkConfig, gcfg: GuidedConfig, seed: Optional[int] = None) -> EncoderDecoderNet:
    """Segmentation net with a 3-class softmax head; ``gcfg.guide == "none"`` gives the plain U-Net."""
    cfg = cfg.model_copy(update={"output_activation": "softmax", "out_channels": NUM_CLASSES})
    if seed is not None:
        torch.manual_seed(seed)
    model = EncoderDecoderNet(cfg, gcfg)
    logger.info(
        f"Built segmentation net: guide={gcfg.guide}, main levels {model.main_level_count}, "
        f"guide levels {model.guide_level_count}, fusion at {model.fusion_points}"
    )
    return model


def model_device(model: nn.Module) -> torch.device:
    return next(model.parameters()).device


def image_tensor(image: FundusImage) -> torch.Tensor:
    """H×W×3 float64 → 1×3×H×W float32."""
    return torch.from_numpy(np.ascontiguousarray(image.pixels.transpose(2, 0, 1))).float().unsqueeze(0)


def map_tensor(depth: DepthMap) -> torch.Tensor:
    """H×W → 1×1×H×W float32."""
    return torch.from_numpy(np.ascontiguousarray(depth.values)).float()[None, None]


def depth_from_output(out: torch.Tensor) -> torch.Tensor:
    """tanh head output mapped from (−1,1) onto (0,1)."""
    return (torch.tanh(out) + 1.0) / 2.0


def _check_resolution(model: EncoderDecoderNet, height: int, width: int, source_id: str):
    resolution = model.cfg.input_resolution
    if (height, width) != (resolution, resolution):
        raise ValueError(f"'{source_id}' is {height}×{width}; the network expects {resolution}×{resolution}")


def forward_depth(model: EncoderDecoderNet, image: FundusImage) -> DepthMap:
    if not image.normalized:
        raise ValueError(f"forward_depth needs a normalized image; '{image.source_id}' is raw")
    if model.cfg.out_channels != 1:
        raise ValueError(f"depth inference needs a 1-channel head, model has {model.cfg.out_channels}")
    _check_resolution(model, image.height, image.width, image.source_id)
    model.eval()
    with torch.no_grad():
        out = model(image_tensor(image).to(model_device(model)))
    values = depth_from_output(out)[0, 0].cpu().double().numpy()
    return DepthMap(values, source_id=image.source_id)


def forward_seg(model: EncoderDecoderNet, image: FundusImage, guide: Optional[DepthMap] = None) -> ProbabilityMap:
    _check_resolution(model, image.height, image.width, image.source_id)
    guide_tensor = None
    if model.is_guided:
        if guide is None:
            raise ValueError(f"guided network needs a guide for '{image.source_id}'")
        if guide.shape != (image.height, image.width):
            raise ShapeMismatchError(
                f"guide {guide.shape} and image {(image.height, image.width)} of '{image.source_id}' differ"
            )
        guide_tensor = map_tensor(guide).to(model_device(model))
    elif guide is not None:
        logger.debug(f"Unguided network ignores the guide supplied for '{image.source_id}'")
    model.eval()
    with torch.no_grad():
        logits = model(image_tensor(image).to(model_device(model)), guide_tensor)
    probs = torch.softmax(logits.double(), dim=1)[0].permute(1, 2, 0).cpu().numpy()
    probs = probs / probs.sum(axis=2, keepdims=True)
    return ProbabilityMap(probs, source_id=image.source_id)


def load_compatible_state(model: nn.Module, state: Dict[str, torch.Tensor]) -> Tuple[List[str], List[str]]:
    """Copy every entry whose name and shape match; returns (loaded, skipped) key lists."""
    own = model.state_dict()
    loaded, skipped = [], []
    for key, value in state.items():
        if key in own and own[key].shape == value.shape:
            own[key] = value.clone()
            loaded.append(key)
        else:
            skipped.append(key)
    model.load_state_dict(own)
    if skipped:
        logger.info(f"Warm start skipped {len(skipped)} incompatible entries: {skipped[:6]}")
    logger.info(f"Warm start loaded {len(loaded)} of {len(own)} entries")
    return loaded, skipped
