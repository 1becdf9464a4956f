"""Versioned, self-describing checkpoints.

A checkpoint is a ``torch.save``d dict::

    {"header": {"format": "depthseg-checkpoint", "version": 1},
     "kind": "depth" | "seg" | "pretrain-denoising" | "pretrain-pseudo_depth",
     "network": NetworkConfig dump, "guided": GuidedConfig dump or None,
     "train": TrainConfig dump or None,
     "model_state": ..., "optimizer_state": ..., "scheduler_state": ...,
     "epoch": int, "step": int, "best_val": float or None, "extra": dict}

Only primitives and tensors are stored, so loading works with ``weights_only=True``.
"""

import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional

import torch

from depthseg.exceptions import CheckpointError
from depthseg.model.networks import EncoderDecoderNet, build_depth_net, build_guided_seg_net
from depthseg.schemas.config_schema import GuidedConfig, NetworkConfig, TrainConfig

logger = logging.getLogger("depthseg")

CHECKPOINT_FORMAT = "depthseg-checkpoint"
CHECKPOINT_VERSION = 1
CHECKPOINT_KINDS = ("depth", "seg", "pretrain-denoising", "pretrain-pseudo_depth")
# fields that change the parameter layout
ARCHITECTURE_FIELDS = (
    "input_resolution",
    "in_channels",
    "base_filters",
    "encoder_levels",
    "block_kind",
    "dilation_rates",
    "out_channels",
)


def save_checkpoint(
    path,
    model: EncoderDecoderNet,
    kind: str,
    optimizer: Optional[torch.optim.Optimizer] = None,
    scheduler=None,
    epoch: int = 0,
    step: int = 0,
    best_val: Optional[float] = None,
    train_cfg: Optional[TrainConfig] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write atomically: temp file in the target directory, then ``os.replace``."""
    if kind not in CHECKPOINT_KINDS:
        raise ValueError(f"Unknown checkpoint kind '{kind}', expected one of {CHECKPOINT_KINDS}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "header": {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION},
        "kind": kind,
        "network": model.cfg.model_dump(mode="json"),
        "guided": model.guided_cfg.model_dump(mode="json") if model.guided_cfg is not None else None,
        "train": train_cfg.model_dump(mode="json") if train_cfg is not None else None,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "scheduler_state": scheduler.state_dict() if scheduler is not None else None,
        "epoch": int(epoch),
        "step": int(step),
        "best_val": None if best_val is None else float(best_val),
        "extra": extra or {},
    }
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        torch.save(payload, tmp_name)
        os.replace(tmp_name, path)
    except Exception:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    logger.info(f"Saved {kind} checkpoint to {path} (epoch {epoch}, step {step})")
    return path


def load_checkpoint(path, map_location: str = "cpu") -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    header = payload.get("header") if isinstance(payload, dict) else None
    if not header or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has checkpoint version {header.get('version')}, expected {CHECKPOINT_VERSION}")
    if payload.get("kind") not in CHECKPOINT_KINDS:
        raise CheckpointError(f"{path} has unknown kind {payload.get('kind')!r}")
    return payload


def checkpoint_configs(payload: Dict[str, Any]):
    network = NetworkConfig(**payload["network"])
    guided = GuidedConfig(**payload["guided"]) if payload.get("guided") else None
    return network, guided


def model_from_checkpoint(payload: Dict[str, Any]) -> EncoderDecoderNet:
    network, guided = checkpoint_configs(payload)
    if payload["kind"] == "seg":
        if guided is None:
            guided = GuidedConfig(guide="none", main_levels=network.encoder_levels)
        model = build_guided_seg_net(network, guided)
    else:
        model = build_depth_net(network)
    model.load_state_dict(payload["model_state"])
    return model


def check_compatible(model: EncoderDecoderNet, payload: Dict[str, Any]):
    """Raise ``CheckpointError`` unless ``payload`` can be loaded into ``model`` without reshaping."""
    network, guided = checkpoint_configs(payload)
    mismatched = [
        f"{name}: checkpoint {getattr(network, name)} vs model {getattr(model.cfg, name)}"
        for name in ARCHITECTURE_FIELDS
        if getattr(network, name) != getattr(model.cfg, name)
    ]
    model_guide = model.guided_cfg.guide if model.guided_cfg is not None else "none"
    ckpt_guide = guided.guide if guided is not None and guided.enabled else "none"
    if (model_guide == "none") != (ckpt_guide == "none"):
        mismatched.append(f"guide: checkpoint {ckpt_guide} vs model {model_guide}")
    if mismatched:
        raise CheckpointError(f"Checkpoint is incompatible with the model: {'; '.join(mismatched)}")
