"""Pseudo-depth synthesis: the inverted, vessel-inpainted green channel."""

import logging
from typing import Optional

import numpy as np
from scipy.ndimage import convolve, distance_transform_edt
from skimage.filters import threshold_otsu
from skimage.morphology import black_tophat, disk, remove_small_objects

from depthseg.exceptions import ShapeMismatchError
from depthseg.schemas.sample_schema import DepthMap, FundusImage, PseudoDepthMap, Sample

logger = logging.getLogger("depthseg")

GREEN = 1
REFERENCE_RESOLUTION = 256
REFERENCE_RADIUS = 7
_NEIGHBOURS = np.array([[0.0, 0.25, 0.0], [0.25, 0.0, 0.25], [0.0, 0.25, 0.0]])


def _unit_rescale(values: np.ndarray) -> Optional[np.ndarray]:
    lo, hi = values.min(), values.max()
    if hi - lo < 1e-12:
        return None
    return (values - lo) / (hi - lo)


def vessel_radius(height: int, width: int) -> int:
    return max(2, int(round(REFERENCE_RADIUS * min(height, width) / REFERENCE_RESOLUTION)))


def segment_vessels(
    image: FundusImage,
    radius: Optional[int] = None,
    min_contrast: float = 0.02,
    min_size: int = 10,
) -> np.ndarray:
    """Dark elongated structures of the green channel: black top-hat + Otsu."""
    green = _unit_rescale(image.pixels[..., GREEN])
    empty = np.zeros((image.height, image.width), dtype=bool)
    if green is None:
        return empty
    radius = radius or vessel_radius(image.height, image.width)
    tophat = black_tophat(green, footprint=disk(radius))
    if tophat.max() < min_contrast:
        return empty
    threshold = max(float(threshold_otsu(tophat)), min_contrast)
    mask = tophat > threshold
    if min_size > 1:
        mask = remove_small_objects(mask, min_size=min_size)
    logger.debug(f"Vessel mask for '{image.source_id}': {int(mask.sum())} px (radius {radius}, threshold {threshold:.4f})")
    return mask


def inpaint(channel: np.ndarray, mask: np.ndarray, tol: float = 1e-4, max_iter: int = 500) -> np.ndarray:
    """Fill masked pixels by iterative 4-neighbour averaging; unmasked pixels are untouched."""
    channel = np.asarray(channel, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != channel.shape:
        raise ShapeMismatchError(f"mask shape {mask.shape} does not match channel shape {channel.shape}")
    if not mask.any():
        return channel.copy()
    if mask.all():
        raise ValueError("Cannot inpaint: every pixel is masked")

    # start from the nearest known value
    _, (rows, cols) = distance_transform_edt(mask, return_indices=True)
    out = channel[rows, cols]
    for iteration in range(max_iter):
        averaged = convolve(out, _NEIGHBOURS, mode="nearest")
        change = np.abs(averaged[mask] - out[mask]).max()
        out[mask] = averaged[mask]
        if change < tol:
            break
    logger.debug(f"Inpainting stopped after {iteration + 1} iterations (last change {change:.2e})")
    return out


def make_pseudo_depth(
    image: FundusImage,
    vessel_mask: Optional[np.ndarray] = None,
    radius: Optional[int] = None,
) -> PseudoDepthMap:
    if not image.normalized:
        raise ValueError(f"Pseudo-depth needs a channel-normalized image; '{image.source_id}' is raw")
    green = _unit_rescale(image.pixels[..., GREEN])
    if green is None:
        raise ValueError(f"Green channel of '{image.source_id}' is constant; pseudo-depth is undefined")
    mask = segment_vessels(image, radius=radius) if vessel_mask is None else np.asarray(vessel_mask, dtype=bool)
    values = np.clip(inpaint(1.0 - green, mask), 0.0, 1.0)
    return PseudoDepthMap(values=values, source_id=image.source_id, vessel_mask=mask)


def pseudo_depth_sample(sample: Sample) -> Sample:
    """Same image, pseudo-depth as the regression target."""
    pseudo = make_pseudo_depth(sample.image)
    return Sample(image=sample.image, target=DepthMap(pseudo.values, sample.source_id), glaucoma=sample.glaucoma)


def pseudo_depth_guide(sample: Sample) -> Sample:
    """Same sample, pseudo-depth as the guide image."""
    pseudo = make_pseudo_depth(sample.image)
    return Sample(
        image=sample.image, target=sample.target, guide=DepthMap(pseudo.values, sample.source_id), glaucoma=sample.glaucoma
    )
