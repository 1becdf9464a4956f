"""Synthetic optic-nerve-head corpus with known depth, vessels and disc/cup labels.

The green channel is built as ``1 - depth`` (affinely squeezed into [0,1]) with dark
vessels drawn on top, which is exactly the relation pseudo-depth reconstruction
exploits. Used by the test-suite and by the ``synthesize`` subcommand.
"""

from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.ndimage import binary_dilation
from skimage.draw import ellipse, line
from skimage.morphology import disk

from depthseg.schemas.sample_schema import CUP, DISC_RIM, DepthMap, FundusImage, LabelMap, Sample


@dataclass
class SyntheticCase:
    image: FundusImage
    depth: DepthMap
    labels: LabelMap
    vessel_mask: np.ndarray
    cdr: float
    glaucoma: bool

    def depth_sample(self) -> Sample:
        return Sample(image=self.image, target=self.depth, glaucoma=self.glaucoma)

    def seg_sample(self) -> Sample:
        return Sample(image=self.image, target=self.labels, guide=self.depth, glaucoma=self.glaucoma)


def _vessels(rng: np.random.Generator, resolution: int, center, count: int = 4, width: int = 1) -> np.ndarray:
    mask = np.zeros((resolution, resolution), dtype=bool)
    for angle in rng.uniform(0, 2 * np.pi, size=count):
        r0 = rng.uniform(0.05, 0.15) * resolution
        r1 = resolution
        start = (center[0] + r0 * np.sin(angle), center[1] + r0 * np.cos(angle))
        end = (center[0] + r1 * np.sin(angle), center[1] + r1 * np.cos(angle))
        rr, cc = line(int(start[0]), int(start[1]), int(end[0]), int(end[1]))
        keep = (rr >= 0) & (rr < resolution) & (cc >= 0) & (cc < resolution)
        mask[rr[keep], cc[keep]] = True
    if width > 0:
        mask = binary_dilation(mask, structure=disk(width).astype(bool))
    return mask


def make_synthetic_case(rng: np.random.Generator, resolution: int = 64, vessels: bool = True, index: int = 0) -> SyntheticCase:
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    cy = resolution / 2 + rng.uniform(-0.05, 0.05) * resolution
    cx = resolution / 2 + rng.uniform(-0.05, 0.05) * resolution

    disc_radius = rng.uniform(0.28, 0.38) * resolution
    cdr = float(rng.uniform(0.3, 0.85))
    cup_radius = cdr * disc_radius

    # cup-shaped excavation: deepest at the center, flat outside the disc
    r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / (cup_radius**2)
    depth = np.exp(-0.5 * r2)
    depth = (depth - depth.min()) / (depth.max() - depth.min())

    green = 0.15 + 0.7 * (1.0 - depth)
    red = 0.55 + 0.35 * (1.0 - depth) * np.exp(-0.5 * r2 / 4)
    blue = 0.1 + 0.15 * (1.0 - depth)

    vessel_mask = np.zeros((resolution, resolution), dtype=bool)
    if vessels:
        vessel_mask = _vessels(rng, resolution, (cy, cx))
        green = np.where(vessel_mask, green * 0.45, green)
        red = np.where(vessel_mask, red * 0.8, red)

    labels = np.zeros((resolution, resolution), dtype=np.int64)
    rr, cc = ellipse(cy, cx, disc_radius, disc_radius * 0.95, shape=labels.shape)
    labels[rr, cc] = DISC_RIM
    rr, cc = ellipse(cy, cx, cup_radius, cup_radius * 0.95, shape=labels.shape)
    labels[rr, cc] = CUP

    rows_disc = np.nonzero((labels > 0).any(axis=1))[0]
    rows_cup = np.nonzero((labels == CUP).any(axis=1))[0]
    raster_cdr = (np.ptp(rows_cup) + 1) / (np.ptp(rows_disc) + 1) if rows_cup.size else 0.0

    source_id = f"synth_{index:04d}"
    pixels = np.clip(np.stack([red, green, blue], axis=-1), 0.0, 1.0)
    return SyntheticCase(
        image=FundusImage(pixels, source_id=source_id),
        depth=DepthMap(depth, source_id=source_id),
        labels=LabelMap(labels, source_id=source_id),
        vessel_mask=vessel_mask,
        cdr=float(raster_cdr),
        glaucoma=bool(raster_cdr > 0.6),
    )


def make_synthetic_corpus(n: int, resolution: int = 64, seed: int = 0, vessels: bool = True) -> List[SyntheticCase]:
    rng = np.random.default_rng(seed)
    return [make_synthetic_case(rng, resolution, vessels, index=i) for i in range(n)]
