import logging
from dataclasses import dataclass

import numpy as np
from skimage.morphology import convex_hull_image

from depthseg.schemas.sample_schema import BACKGROUND, CUP, DISC_RIM, LabelMap, ProbabilityMap

logger = logging.getLogger("depthseg")

DEFAULT_TAU = 0.5


@dataclass
class DiscCupMasks:
    disc: np.ndarray
    cup: np.ndarray

    @property
    def disc_empty(self) -> bool:
        return not self.disc.any()

    def to_labels(self, source_id=""):
        labels = np.full(self.disc.shape, BACKGROUND, dtype=np.int64)
        labels[self.disc] = DISC_RIM
        labels[self.cup] = CUP
        return LabelMap(labels, source_id)


def convex_hull(mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    return convex_hull_image(mask)


def postprocess(prob: ProbabilityMap, tau: float = DEFAULT_TAU) -> DiscCupMasks:
    """Threshold, convex-hull each region and clip the cup to the disc."""
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0,1), got {tau}")
    probs = prob.probs
    disc = convex_hull(probs[..., DISC_RIM] + probs[..., CUP] >= tau)
    cup = convex_hull(probs[..., CUP] >= tau) & disc
    masks = DiscCupMasks(disc=disc, cup=cup)
    if masks.disc_empty:
        logger.warning(f"No disc above tau={tau} for '{prob.source_id}'; CDR is undefined")
    return masks


def masks_from_label_map(labels):
    # already post-processed: no thresholding, no hull
    return DiscCupMasks(disc=labels.labels >= DISC_RIM, cup=labels.labels == CUP)
