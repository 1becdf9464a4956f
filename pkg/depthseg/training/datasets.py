"""torch Dataset views over lists of ``Sample``s."""

import numpy as np
import torch
from torch.utils.data import Dataset

from depthseg.schemas.sample_schema import DepthMap, LabelMap


def _chw(pixels):
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1))).float()


def _map(values):
    return torch.from_numpy(np.ascontiguousarray(values)).float().unsqueeze(0)


def unit_rescale_channels(pixels: np.ndarray) -> np.ndarray:
    """Per-channel min-max rescale of an H×W×C image into [0,1]; constant channels map to 0."""
    lo = pixels.min(axis=(0, 1), keepdims=True)
    span = pixels.max(axis=(0, 1), keepdims=True) - lo
    return np.where(span > 1e-12, (pixels - lo) / np.where(span > 1e-12, span, 1.0), 0.0)


class DepthDataset(Dataset):
    """(image 3×H×W, depth 1×H×W)."""

    def __init__(self, samples):
        for sample in samples:
            if not isinstance(sample.target, DepthMap):
                raise ValueError(f"sample '{sample.source_id}' has no depth target")
        self.samples = list(samples)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        sample = self.samples[index]
        return _chw(sample.image.pixels), _map(sample.target.values)


class DenoisingDataset(Dataset):
    """(image 3×H×W, clean target 3×H×W in [0,1]); noise is added by the trainer."""

    def __init__(self, samples):
        self.samples = list(samples)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        pixels = self.samples[index].image.pixels
        return _chw(pixels), _chw(unit_rescale_channels(pixels))


class SegDataset(Dataset):
    """(image 3×H×W, guide 1×H×W or an empty tensor, labels H×W)."""

    def __init__(self, samples, guided):
        for sample in samples:
            if not isinstance(sample.target, LabelMap):
                raise ValueError(f"sample '{sample.source_id}' has no label target")
            if guided and sample.guide is None:
                raise ValueError(f"sample '{sample.source_id}' has no guide but the network is guided")
        self.samples = list(samples)
        self.guided = guided

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        sample = self.samples[index]
        guide = _map(sample.guide.values) if self.guided else torch.zeros(0)
        return _chw(sample.image.pixels), guide, torch.from_numpy(sample.target.labels).long()
