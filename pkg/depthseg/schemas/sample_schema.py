"""Array-carrying domain types shared by every stage of the pipeline.

Images are stored channel-last (H×W×3) in float64; maps are H×W. Configuration-like
types (boxes, stats, splits) live in ``config_schema`` as pydantic models.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal, Optional, Union

import numpy as np

from depthseg.exceptions import ShapeMismatchError

NUM_CLASSES = 3
BACKGROUND, DISC_RIM, CUP = 0, 1, 2
CLASS_NAMES = ("background", "disc_rim", "cup")


@dataclass
class FundusImage:
    pixels: np.ndarray
    source_id: str = ""
    normalized: bool = False

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ShapeMismatchError(f"FundusImage expects H×W×3 pixels, got shape {pixels.shape}")
        if not self.normalized and pixels.size and (pixels.min() < -1e-9 or pixels.max() > 1 + 1e-9):
            raise ValueError(
                f"Raw pixels of '{self.source_id}' must lie in [0,1], "
                f"got range [{pixels.min():.4f}, {pixels.max():.4f}]"
            )
        self.pixels = pixels

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray, normalized: Optional[bool] = None) -> "FundusImage":
        return replace(self, pixels=pixels, normalized=self.normalized if normalized is None else normalized)


@dataclass
class DepthMap:
    """Relative depth, unit-normalized per dataset."""

    values: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeMismatchError(f"DepthMap expects an H×W array, got shape {values.shape}")
        self.values = values

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class PseudoDepthMap(DepthMap):
    vessel_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        super().__post_init__()
        if self.vessel_mask is None:
            self.vessel_mask = np.zeros(self.values.shape, dtype=bool)
        self.vessel_mask = np.asarray(self.vessel_mask, dtype=bool)
        if self.vessel_mask.shape != self.values.shape:
            raise ShapeMismatchError(
                f"vessel_mask shape {self.vessel_mask.shape} does not match values {self.values.shape}"
            )


@dataclass
class LabelMap:
    labels: np.ndarray
    source_id: str = ""
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeMismatchError(f"LabelMap expects an H×W array, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(
                f"Labels of '{self.source_id}' must lie in 0..{self.num_classes - 1}, "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        self.labels = labels.astype(np.int64)

    @property
    def shape(self) -> tuple:
        return self.labels.shape


@dataclass
class ProbabilityMap:
    """Per-pixel class distribution, H×W×C."""

    probs: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 3:
            raise ShapeMismatchError(f"ProbabilityMap expects H×W×C, got shape {probs.shape}")
        self.probs = probs

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    def argmax(self) -> LabelMap:
        return LabelMap(np.argmax(self.probs, axis=2), self.source_id, self.num_classes)


Target = Union[DepthMap, LabelMap]


@dataclass
class Sample:
    """One training/evaluation item: an image, its target, and optional extras."""

    image: FundusImage
    target: Optional[Target] = None
    guide: Optional[DepthMap] = None
    glaucoma: Optional[bool] = None

    @property
    def kind(self) -> Literal["depth", "label", "none"]:
        if isinstance(self.target, LabelMap):
            return "label"
        if isinstance(self.target, DepthMap):
            return "depth"
        return "none"

    @property
    def source_id(self) -> str:
        return self.image.source_id
