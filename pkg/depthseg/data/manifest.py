"""Dataset manifests and image IO.

A manifest is a CSV with one row per sample::

    id,image,depth,label,roi_x,roi_y,roi_side,depth_min,depth_max,glaucoma

Only ``image`` is required. Relative paths resolve against the manifest directory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from skimage import io as skio

from depthseg.data.pipeline import (
    canonical_stats_from_image,
    centered_box,
    choose_canonical_id,
    crop_sample,
    dataset_depth_range,
    normalize_sample,
    scale_depth,
)
from depthseg.schemas.config_schema import CanonicalStats, DataConfig, RoiBox
from depthseg.schemas.sample_schema import BACKGROUND, CUP, DISC_RIM, DepthMap, FundusImage, LabelMap, Sample

logger = logging.getLogger("depthseg")

PATH_COLUMNS = ("image", "depth", "label")
ROI_COLUMNS = ("roi_x", "roi_y", "roi_side")


def read_manifest(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    df = pd.read_csv(path, dtype={"id": str})
    if "image" not in df.columns:
        raise ValueError(f"Manifest {path} has no 'image' column; columns are {list(df.columns)}")

    base = path.parent
    for col in PATH_COLUMNS:
        if col in df.columns:
            df[col] = df[col].apply(lambda p: str(base / p) if isinstance(p, str) and p else None)
    if "id" not in df.columns:
        df["id"] = df["image"].apply(lambda p: Path(p).stem)
    df["id"] = df["id"].astype(str)
    duplicated = df["id"][df["id"].duplicated()].tolist()
    if duplicated:
        raise ValueError(f"Manifest {path} has duplicate ids: {duplicated[:5]}")
    logger.info(f"Read manifest {path} with {len(df)} rows")
    return df.reset_index(drop=True)


def _to_unit_range(array: np.ndarray) -> np.ndarray:
    if array.dtype == np.uint8:
        return array.astype(np.float64) / 255.0
    if array.dtype == np.uint16:
        return array.astype(np.float64) / 65535.0
    if array.dtype == bool:
        return array.astype(np.float64)
    return np.clip(array.astype(np.float64), 0.0, 1.0)


def load_fundus_image(path, source_id: str = "") -> FundusImage:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image not found: {path}")
    array = skio.imread(str(path))
    if array.ndim == 2:
        array = np.stack([array] * 3, axis=-1)
    elif array.shape[2] == 4:
        array = array[..., :3]
    return FundusImage(_to_unit_range(array), source_id=source_id or path.stem)


def load_depth_map(path, depth_min: float = 0.0, depth_max: float = 1.0, source_id: str = "") -> DepthMap:
    """Load a 16-bit PNG (dequantized with the declared range) or an ``.npz`` float container."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Depth map not found: {path}")
    if path.suffix == ".npz":
        with np.load(path) as data:
            return DepthMap(data["depth"].astype(np.float64), source_id=source_id or path.stem)
    array = skio.imread(str(path))
    if array.ndim == 3:
        array = array[..., 0]
    values = _to_unit_range(array) * (depth_max - depth_min) + depth_min
    return DepthMap(values, source_id=source_id or path.stem)


def decode_labels(array: np.ndarray, encoding: str = "index") -> np.ndarray:
    if array.ndim == 3:
        array = array[..., 0]
    if encoding == "index":
        return array.astype(np.int64)
    if encoding == "grayscale":
        labels = np.full(array.shape, DISC_RIM, dtype=np.int64)
        labels[array >= 192] = BACKGROUND
        labels[array < 64] = CUP
        return labels
    raise ValueError(f"Unknown label encoding '{encoding}', expected 'index' or 'grayscale'")


def load_label_map(path, encoding: str = "index", source_id: str = "") -> LabelMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Label map not found: {path}")
    return LabelMap(decode_labels(skio.imread(str(path)), encoding), source_id=source_id or path.stem)


def save_image(pixels: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    skio.imsave(str(path), (np.clip(pixels, 0, 1) * 255).round().astype(np.uint8), check_contrast=False)
    return path


def save_depth_png(depth: DepthMap, path) -> Path:
    """16-bit PNG of a depth map in [0,1] (declared range 0..1)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    quantized = (np.clip(depth.values, 0.0, 1.0) * 65535).round().astype(np.uint16)
    skio.imsave(str(path), quantized, check_contrast=False)
    return path


def save_depth_npz(depth: DepthMap, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, depth=depth.values, min=float(depth.values.min()), max=float(depth.values.max()))
    return path


def save_label_png(labels: LabelMap, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    skio.imsave(str(path), labels.labels.astype(np.uint8), check_contrast=False)
    return path


def save_mask_png(mask: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    skio.imsave(str(path), (np.asarray(mask, dtype=bool) * 255).astype(np.uint8), check_contrast=False)
    return path


def _optional(row: pd.Series, col: str):
    if col not in row.index:
        return None
    value = row[col]
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return None
    return value


def row_box(row: pd.Series, height: int, width: int) -> RoiBox:
    values = [_optional(row, col) for col in ROI_COLUMNS]
    if any(v is None for v in values):
        return centered_box(height, width)
    return RoiBox(center_x=int(values[0]), center_y=int(values[1]), side=int(values[2]))


def load_sample(row: pd.Series, data_cfg: DataConfig) -> Sample:
    """Load one manifest row at source resolution (no crop, no normalization)."""
    source_id = str(row["id"])
    image = load_fundus_image(row["image"], source_id)
    target = None
    label_path = _optional(row, "label")
    depth_path = _optional(row, "depth")
    if label_path:
        target = load_label_map(label_path, data_cfg.label_encoding, source_id)
    elif depth_path:
        target = load_depth_map(
            depth_path,
            float(_optional(row, "depth_min") or 0.0),
            float(_optional(row, "depth_max") or 1.0),
            source_id,
        )
    glaucoma = _optional(row, "glaucoma")
    return Sample(image=image, target=target, glaucoma=None if glaucoma is None else bool(int(glaucoma)))


def load_depth_for_row(row: pd.Series, data_cfg: DataConfig) -> Optional[DepthMap]:
    depth_path = _optional(row, "depth")
    if not depth_path:
        return None
    return load_depth_map(
        depth_path,
        float(_optional(row, "depth_min") or 0.0),
        float(_optional(row, "depth_max") or 1.0),
        str(row["id"]),
    )


def prepare_sample(
    row: pd.Series,
    data_cfg: DataConfig,
    stats: Optional[CanonicalStats] = None,
    depth_range: Optional[Tuple[float, float]] = None,
    with_depth_guide: bool = False,
) -> Sample:
    """Load → crop ROI → resize to working resolution → normalize → scale depth."""
    sample = load_sample(row, data_cfg)
    if with_depth_guide:
        sample.guide = load_depth_for_row(row, data_cfg)
    box = row_box(row, sample.image.height, sample.image.width)
    sample = crop_sample(sample, box, data_cfg.resolution)
    if stats is not None:
        sample = normalize_sample(sample, stats)
    if depth_range is not None:
        if isinstance(sample.target, DepthMap):
            sample.target = scale_depth(sample.target, depth_range)
        if sample.guide is not None:
            sample.guide = scale_depth(sample.guide, depth_range)
    return sample


def load_raw_depths(manifest: pd.DataFrame, data_cfg: DataConfig) -> List[DepthMap]:
    depths = []
    for _, row in manifest.iterrows():
        depth = load_depth_for_row(row, data_cfg)
        if depth is not None:
            depths.append(depth)
    return depths


def read_manifests(paths: Sequence) -> pd.DataFrame:
    """Concatenate several manifests; ids must stay unique across them."""
    frames = [read_manifest(p) for p in paths]
    if not frames:
        raise ValueError("At least one manifest is required")
    df = pd.concat(frames, ignore_index=True)
    duplicated = df["id"][df["id"].duplicated()].tolist()
    if duplicated:
        raise ValueError(f"Sample ids repeat across manifests: {duplicated[:5]}")
    return df


def resolve_canonical_stats(manifest: pd.DataFrame, data_cfg: DataConfig) -> CanonicalStats:
    """Stats of the canonical image (cropped and resized like every other sample)."""
    if data_cfg.canonical_stats is not None:
        return data_cfg.canonical_stats
    canonical_id = choose_canonical_id(manifest["id"].tolist(), data_cfg.canonical_id)
    row = manifest[manifest["id"] == canonical_id].iloc[0]
    sample = prepare_sample(row, data_cfg)
    stats = canonical_stats_from_image(sample.image)
    logger.info(f"Canonical image '{canonical_id}': mean {stats.mean}, std {stats.std}")
    return stats


@dataclass
class LoadedDataset:
    samples: List[Sample]
    stats: CanonicalStats
    depth_range: Optional[Tuple[float, float]]

    @property
    def ids(self) -> List[str]:
        return [s.source_id for s in self.samples]

    def subset(self, ids: Sequence[str]) -> List[Sample]:
        wanted = set(ids)
        return [s for s in self.samples if s.source_id in wanted]


def load_dataset(
    manifest: pd.DataFrame,
    data_cfg: DataConfig,
    stats: Optional[CanonicalStats] = None,
    with_depth_guide: bool = False,
    depth_range: Optional[Tuple[float, float]] = None,
) -> LoadedDataset:
    """Prepare every row: crop, resize, normalize to the canonical image, scale depth per dataset.

    A given ``depth_range`` (the training range stored in a checkpoint) replaces the range of this manifest.
    """
    stats = stats or resolve_canonical_stats(manifest, data_cfg)
    if depth_range is None:
        raw_depths = load_raw_depths(manifest, data_cfg)
        depth_range = dataset_depth_range(raw_depths) if raw_depths else None
    else:
        depth_range = (float(depth_range[0]), float(depth_range[1]))
    samples = [prepare_sample(row, data_cfg, stats, depth_range, with_depth_guide) for _, row in manifest.iterrows()]
    logger.info(f"Prepared {len(samples)} samples at {data_cfg.resolution}×{data_cfg.resolution}")
    return LoadedDataset(samples=samples, stats=stats, depth_range=depth_range)
