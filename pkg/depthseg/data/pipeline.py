"""ROI cropping, canonical normalization, augmentation and split management.

All functions are pure: they return new images/samples and never mutate their inputs,
so they can be mapped over samples in parallel.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from skimage.transform import resize
from sklearn.model_selection import KFold

from depthseg.schemas.config_schema import AugmentPolicy, CanonicalStats, RoiBox, SplitSpec
from depthseg.schemas.sample_schema import DepthMap, FundusImage, LabelMap, Sample

logger = logging.getLogger("depthseg")


def resize_array(array: np.ndarray, shape: Tuple[int, int], order: int) -> np.ndarray:
    """Resize the two leading axes; order 0 keeps label values intact."""
    if array.shape[:2] == tuple(shape):
        return array.copy()
    downsampling = shape[0] < array.shape[0] or shape[1] < array.shape[1]
    out = resize(
        array.astype(np.float64),
        tuple(shape) + array.shape[2:],
        order=order,
        mode="edge",
        anti_aliasing=bool(order > 0 and downsampling),
        preserve_range=True,
    )
    if order == 0:
        return np.rint(out).astype(array.dtype)
    return out


def centered_box(height: int, width: int) -> RoiBox:
    side = min(height, width)
    return RoiBox(center_x=width // 2, center_y=height // 2, side=side)


def _crop(array: np.ndarray, box: RoiBox) -> np.ndarray:
    return array[box.y0 : box.y1, box.x0 : box.x1].copy()


def crop_roi(image: FundusImage, box: RoiBox, resolution: Optional[int] = None) -> FundusImage:
    if not box.fits(image.height, image.width):
        raise ValueError(
            f"ROI box x[{box.x0}:{box.x1}] y[{box.y0}:{box.y1}] "
            f"(center {box.center_x},{box.center_y}, side {box.side}) "
            f"exceeds image bounds {image.width}×{image.height} of '{image.source_id}'"
        )
    pixels = _crop(image.pixels, box)
    if resolution is not None and resolution != box.side:
        pixels = resize_array(pixels, (resolution, resolution), order=1)
        if not image.normalized:
            pixels = np.clip(pixels, 0.0, 1.0)
    return image.with_pixels(pixels)


def crop_sample(sample: Sample, box: RoiBox, resolution: Optional[int] = None) -> Sample:
    image = crop_roi(sample.image, box, resolution)
    size = (image.height, image.width)
    target = sample.target
    if isinstance(target, LabelMap):
        target = replace(target, labels=resize_array(_crop(target.labels, box), size, order=0))
    elif isinstance(target, DepthMap):
        target = replace(target, values=resize_array(_crop(target.values, box), size, order=1))
    guide = sample.guide
    if guide is not None:
        guide = replace(guide, values=resize_array(_crop(guide.values, box), size, order=1))
    return replace(sample, image=image, target=target, guide=guide)


def canonical_stats_from_image(image: FundusImage) -> CanonicalStats:
    pixels = image.pixels.reshape(-1, 3)
    return CanonicalStats(mean=tuple(pixels.mean(axis=0).tolist()), std=tuple(pixels.std(axis=0).tolist()))


def choose_canonical_id(sample_ids: Iterable[str], override: Optional[str] = None) -> str:
    ids = sorted(sample_ids)
    if not ids:
        raise ValueError("Cannot choose a canonical image from an empty id list")
    if override is not None:
        if override not in ids:
            raise ValueError(f"Configured canonical image id '{override}' is not in the dataset")
        return override
    return ids[0]


def normalize_to_canonical(image: FundusImage, stats: CanonicalStats) -> FundusImage:
    """Standardize each channel, then remap it onto the canonical mean/std.

    Reapplying with the same stats is a fixed point, so an already normalized image
    comes back unchanged.
    """
    pixels = image.pixels
    out = np.empty_like(pixels)
    for channel in range(3):
        values = pixels[..., channel]
        mean, std = values.mean(), values.std()
        if std < 1e-12:
            raise ValueError(f"Channel {channel} of '{image.source_id}' has zero variance; cannot normalize")
        out[..., channel] = (values - mean) / std * stats.std[channel] + stats.mean[channel]
    return image.with_pixels(out, normalized=True)


def normalize_sample(sample: Sample, stats: CanonicalStats) -> Sample:
    return replace(sample, image=normalize_to_canonical(sample.image, stats))


def dataset_depth_range(depths: Iterable[DepthMap]) -> Tuple[float, float]:
    lo, hi = np.inf, -np.inf
    for depth in depths:
        lo = min(lo, float(depth.values.min()))
        hi = max(hi, float(depth.values.max()))
    if not np.isfinite(lo) or hi <= lo:
        raise ValueError(f"Dataset depth range is degenerate: [{lo}, {hi}]")
    return lo, hi


def scale_depth(depth: DepthMap, depth_range: Tuple[float, float]) -> DepthMap:
    lo, hi = depth_range
    return replace(depth, values=np.clip((depth.values - lo) / (hi - lo), 0.0, 1.0))


# Augmentation


def _map_target(sample: Sample, fn_values, fn_labels) -> Sample:
    target = sample.target
    if isinstance(target, LabelMap):
        target = replace(target, labels=fn_labels(target.labels))
    elif isinstance(target, DepthMap):
        target = replace(target, values=fn_values(target.values))
    guide = sample.guide
    if guide is not None:
        guide = replace(guide, values=fn_values(guide.values))
    return replace(sample, target=target, guide=guide)


def flip_sample(sample: Sample, axis: int = 1) -> Sample:
    """Mirror image, target and guide; axis 1 is horizontal, axis 0 vertical."""

    def flip(a):
        return np.flip(a, axis=axis).copy()

    flipped = _map_target(sample, flip, flip)
    return replace(flipped, image=sample.image.with_pixels(flip(sample.image.pixels)))


def _zoom_array(array: np.ndarray, factor: float, order: int) -> np.ndarray:
    height, width = array.shape[:2]
    crop_h = int(round(height / factor))
    crop_w = int(round(width / factor))
    if crop_h == height and crop_w == width:
        return array.copy()
    if crop_h < height:
        top = (height - crop_h) // 2
        left = (width - crop_w) // 2
        region = array[top : top + crop_h, left : left + crop_w]
    else:
        pad_h, pad_w = crop_h - height, crop_w - width
        pad = [(pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)]
        pad += [(0, 0)] * (array.ndim - 2)
        region = np.pad(array, pad, mode="reflect")
    return resize_array(region, (height, width), order=order)


def zoom_sample(sample: Sample, factor: float) -> Sample:
    """Zoom about the center and re-resize to the original resolution."""
    if factor <= 0:
        raise ValueError(f"zoom factor must be > 0, got {factor}")
    zoomed = _map_target(sample, lambda v: _zoom_array(v, factor, 1), lambda l: _zoom_array(l, factor, 0))
    pixels = _zoom_array(sample.image.pixels, factor, 1)
    if not sample.image.normalized:
        pixels = np.clip(pixels, 0.0, 1.0)
    return replace(zoomed, image=sample.image.with_pixels(pixels))


def jitter_sample(sample: Sample, sigma: float, rng: np.random.Generator) -> Sample:
    # the image only; targets and guides stay clean
    if sigma <= 0:
        return sample
    pixels = sample.image.pixels + rng.normal(0.0, sigma, size=sample.image.pixels.shape)
    if not sample.image.normalized:
        pixels = np.clip(pixels, 0.0, 1.0)
    return replace(sample, image=sample.image.with_pixels(pixels))


def _sample_rng(policy: AugmentPolicy, sample: Sample) -> np.random.Generator:
    return np.random.default_rng([policy.seed, zlib.crc32(sample.source_id.encode("utf-8"))])


def augment(sample: Sample, policy: AugmentPolicy, rng: Optional[np.random.Generator] = None) -> List[Sample]:
    """Expand one sample into ``policy.multiplier`` samples; the first is the original."""
    if sample.kind not in ("depth", "label"):
        raise ValueError(f"augment needs a DepthMap or LabelMap target, sample '{sample.source_id}' has none")
    if policy.multiplier < 1:
        raise ValueError(f"augmentation multiplier must be >= 1, got {policy.multiplier}")
    rng = rng if rng is not None else _sample_rng(policy, sample)
    outputs = [sample]
    for _ in range(policy.multiplier - 1):
        out = sample
        if rng.random() < policy.hflip_prob:
            out = flip_sample(out, axis=1)
        if rng.random() < policy.vflip_prob:
            out = flip_sample(out, axis=0)
        out = zoom_sample(out, float(rng.uniform(*policy.zoom_range)))
        out = jitter_sample(out, float(rng.uniform(0.0, policy.noise_sigma_max)), rng)
        outputs.append(out)
    return outputs


def augment_all(samples: Sequence[Sample], policy: AugmentPolicy) -> List[Sample]:
    augmented = [out for sample in samples for out in augment(sample, policy)]
    logger.info(f"Augmented {len(samples)} samples to {len(augmented)} (x{policy.multiplier})")
    return augmented


# Splits


def make_splits(sample_ids: Iterable[str], mode: str = "kfold", fold_count: int = 5, seed: int = 0) -> SplitSpec:
    """Deterministic disjoint folds; ``half`` is a two-fold train/test split."""
    ids = list(sample_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("Sample ids must be unique to build splits")
    ids = sorted(ids)
    if mode == "half":
        fold_count = 2
    elif mode != "kfold":
        raise ValueError(f"Unknown split mode '{mode}', expected 'kfold' or 'half'")
    if fold_count < 2:
        raise ValueError(f"fold_count must be >= 2, got {fold_count}")
    if len(ids) < fold_count:
        raise ValueError(f"Need at least {fold_count} samples for {fold_count} folds, got {len(ids)}")

    assignments = {}
    splitter = KFold(n_splits=fold_count, shuffle=True, random_state=seed)
    for fold, (_, test_index) in enumerate(splitter.split(np.arange(len(ids)))):
        for i in test_index:
            assignments[ids[i]] = fold
    return SplitSpec(fold_count=fold_count, fold_assignments=assignments, mode=mode, seed=seed)
