import logging
import os
from typing import Optional

from depthseg.exceptions import CheckpointError
from depthseg.model.checkpoint import load_checkpoint, model_from_checkpoint
from depthseg.model.networks import forward_depth, forward_seg
from depthseg.preprocessing.pseudo_depth import make_pseudo_depth
from depthseg.schemas.sample_schema import DepthMap, FundusImage, ProbabilityMap, Sample

logger = logging.getLogger("depthseg")


class DepthEstimator:
    def __init__(self, checkpoint_path, device: str = "cpu"):
        """
        Load a trained depth network from a checkpoint.

        Args:
            checkpoint_path: Path to a ``depth`` (or pseudo-depth pretraining) checkpoint
            device: torch device the model runs on
        """
        self.logger = logger
        self.checkpoint_path = str(checkpoint_path)
        self.device = device
        self.model = None
        self.network_config = None
        self.metadata = {}

        try:
            if not os.path.exists(self.checkpoint_path):
                raise FileNotFoundError(f"Checkpoint file not found: {self.checkpoint_path}")
            self.logger.info(f"Attempting to load depth checkpoint from: {self.checkpoint_path}")
            payload = load_checkpoint(self.checkpoint_path)
            if payload["kind"] not in ("depth", "pretrain-pseudo_depth"):
                raise CheckpointError(f"expected a depth checkpoint, got kind '{payload['kind']}'")
            self.model = model_from_checkpoint(payload).to(device)
            self.model.eval()
            self.metadata = (payload.get("extra") or {}).get("metadata", {})
            self.network_config = self.model.cfg
            self.logger.info("Successfully loaded depth network")
        except Exception as e:
            self.logger.error(f"Error initializing DepthEstimator: {str(e)}")
            raise CheckpointError(f"Failed to initialize depth estimator: {str(e)}") from e

    @property
    def resolution(self) -> int:
        return self.network_config.input_resolution

    def predict(self, image: FundusImage) -> DepthMap:
        return forward_depth(self.model, image)


class DiscCupSegmenter:
    """Segmentation network plus whatever guide its variant needs.

    ``guide == "depth"`` uses the sample's guide when present, otherwise the
    attached ``DepthEstimator``; ``pseudo_depth`` computes the guide from the image.
    """

    def __init__(self, checkpoint_path, depth_estimator: Optional[DepthEstimator] = None, device: str = "cpu"):
        self.logger = logger
        self.checkpoint_path = str(checkpoint_path)
        self.depth_estimator = depth_estimator
        self.model = None
        self.metadata = {}
        self.guide_kind = "none"

        try:
            if not os.path.exists(self.checkpoint_path):
                raise FileNotFoundError(f"Checkpoint file not found: {self.checkpoint_path}")
            self.logger.info(f"Attempting to load segmentation checkpoint from: {self.checkpoint_path}")
            payload = load_checkpoint(self.checkpoint_path)
            if payload["kind"] != "seg":
                raise CheckpointError(f"expected a seg checkpoint, got kind '{payload['kind']}'")
            self.model = model_from_checkpoint(payload).to(device)
            self.model.eval()
            self.metadata = (payload.get("extra") or {}).get("metadata", {})
            if self.model.guided_cfg is not None:
                self.guide_kind = self.model.guided_cfg.guide
            self.logger.info(f"Successfully loaded segmentation network (guide={self.guide_kind})")
        except Exception as e:
            self.logger.error(f"Error initializing DiscCupSegmenter: {str(e)}")
            raise CheckpointError(f"Failed to initialize segmenter: {str(e)}") from e

    @property
    def resolution(self) -> int:
        return self.model.cfg.input_resolution

    def guide_for(self, sample: Sample) -> Optional[DepthMap]:
        if self.guide_kind == "none":
            return None
        if self.guide_kind == "pseudo_depth":
            pseudo = make_pseudo_depth(sample.image)
            return DepthMap(pseudo.values, sample.source_id)
        if sample.guide is not None:
            return sample.guide
        if self.depth_estimator is None:
            raise ValueError(
                f"'{sample.source_id}' has no depth guide and no depth checkpoint was given to estimate one"
            )
        return self.depth_estimator.predict(sample.image)

    def predict(self, sample: Sample) -> ProbabilityMap:
        return forward_seg(self.model, sample.image, self.guide_for(sample))
