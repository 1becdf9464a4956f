"""Optimization loop, pretraining proxies, fine-tuning and warm starts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch.optim import Adam
from torch.optim.lr_scheduler import ReduceLROnPlateau
from torch.utils.data import DataLoader

from depthseg.model.checkpoint import check_compatible, load_checkpoint, save_checkpoint
from depthseg.model.networks import EncoderDecoderNet, depth_from_output, load_compatible_state
from depthseg.preprocessing.pseudo_depth import pseudo_depth_sample
from depthseg.schemas.config_schema import PretrainTask, TrainConfig
from depthseg.schemas.sample_schema import Sample
from depthseg.training.datasets import DenoisingDataset, DepthDataset, SegDataset
from depthseg.training.losses import loss_l2, loss_multiclass_ce, regression_loss

logger = logging.getLogger("depthseg")

CHECKPOINT_KIND = {
    "depth": "depth",
    "seg": "seg",
    "denoising": "pretrain-denoising",
    "pseudo_depth": "pretrain-pseudo_depth",
}
EPOCH_BUDGET = {"depth": "depth", "seg": "seg", "denoising": "pretrain", "pseudo_depth": "pretrain"}


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class TrainResult:
    checkpoint: Optional[Path]
    best_checkpoint: Optional[Path]
    best_val: Optional[float]
    steps: int
    epochs: int
    history: pd.DataFrame = field(default_factory=pd.DataFrame)

    def step_losses(self) -> List[float]:
        if self.history.empty or "loss" not in self.history:
            return []
        return self.history["loss"].dropna().tolist()


class Trainer:
    def __init__(
        self,
        model: EncoderDecoderNet,
        task: str,
        cfg: TrainConfig,
        loss_kind: str = "l2",
        out_dir=None,
        noise_sigma: float = 0.0,
        device: str = "cpu",
        metadata: Optional[Dict] = None,
    ):
        if task not in CHECKPOINT_KIND:
            raise ValueError(f"Unknown training task '{task}', expected one of {sorted(CHECKPOINT_KIND)}")
        self.logger = logger
        self.model = model
        self.task = task
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.noise_sigma = noise_sigma
        self.metadata = dict(metadata or {})
        self.device = torch.device(device)
        self.epochs = cfg.epochs_for(EPOCH_BUDGET[task])

        if task == "seg":
            self.loss_fn = None
        elif task == "denoising":
            self.loss_fn = loss_l2
        else:
            self.loss_fn = regression_loss(loss_kind)
        self.loss_kind = "multiclass_ce" if task == "seg" else ("l2" if task == "denoising" else loss_kind)

        self.model.to(self.device)
        self.optimizer = Adam(self.model.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas))
        self.scheduler = ReduceLROnPlateau(
            self.optimizer, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience
        )
        self.epoch = 0
        self.step = 0
        # batches of self.epoch already trained when a step budget stopped it
        self.epoch_step = 0
        self.best_val: Optional[float] = None
        self.bad_epochs = 0
        self.history: List[Dict] = []

    # data

    def _dataset(self, samples: Sequence[Sample]):
        if self.task == "seg":
            return SegDataset(samples, guided=self.model.is_guided)
        if self.task == "denoising":
            return DenoisingDataset(samples)
        return DepthDataset(samples)

    def _batch_loss(self, batch) -> Tuple[torch.Tensor, Dict[str, float]]:
        if self.task == "seg":
            images, guides, labels = batch
            logits = self.model(images, guides if self.model.is_guided else None)
            loss = loss_multiclass_ce(logits, labels, from_logits=True)
            return loss, {"loss_sum": float(loss.detach()) * labels.numel()}
        images, targets = batch
        if self.task == "denoising" and self.noise_sigma > 0:
            images = images + self.noise_sigma * torch.randn_like(images)
        prediction = depth_from_output(self.model(images))
        return self.loss_fn(prediction, targets), {}

    # evaluation

    def evaluate(self, samples: Sequence[Sample]) -> Dict[str, float]:
        """Validation loss: RMSE for regression tasks, mean cross-entropy for segmentation."""
        loader = DataLoader(self._dataset(samples), batch_size=self.cfg.batch_size, shuffle=False)
        self.model.eval()
        squared, nll, count = 0.0, 0.0, 0
        with torch.no_grad():
            for batch in loader:
                batch = [t.to(self.device) for t in batch]
                if self.task == "seg":
                    images, guides, labels = batch
                    logits = self.model(images, guides if self.model.is_guided else None)
                    nll += float(loss_multiclass_ce(logits, labels, reduction="sum", from_logits=True))
                    count += labels.numel()
                else:
                    images, targets = batch
                    prediction = depth_from_output(self.model(images))
                    squared += float(((prediction - targets) ** 2).sum())
                    count += targets.numel()
        if self.task == "seg":
            return {"val_loss": nll / count, "val_ce": nll / count}
        rmse = float(np.sqrt(squared / count))
        return {"val_loss": rmse, "val_rmse": rmse}

    # checkpoints

    def _save(self, name: str) -> Optional[Path]:
        if self.out_dir is None:
            return None
        return save_checkpoint(
            self.out_dir / name,
            self.model,
            CHECKPOINT_KIND[self.task],
            optimizer=self.optimizer,
            scheduler=self.scheduler,
            epoch=self.epoch,
            step=self.step,
            best_val=self.best_val,
            train_cfg=self.cfg,
            extra={
                "bad_epochs": self.bad_epochs,
                "epoch_step": self.epoch_step,
                "history": self.history,
                "loss_kind": self.loss_kind,
                "metadata": self.metadata,
            },
        )

    def resume(self, path):
        payload = load_checkpoint(path)
        if payload["kind"] != CHECKPOINT_KIND[self.task]:
            raise ValueError(f"cannot resume a '{self.task}' run from a '{payload['kind']}' checkpoint")
        check_compatible(self.model, payload)
        self.model.load_state_dict(payload["model_state"])
        if payload.get("optimizer_state") is not None:
            self.optimizer.load_state_dict(payload["optimizer_state"])
        if payload.get("scheduler_state") is not None:
            self.scheduler.load_state_dict(payload["scheduler_state"])
        self.epoch = payload["epoch"]
        self.step = payload["step"]
        self.best_val = payload["best_val"]
        extra = payload.get("extra") or {}
        self.bad_epochs = int(extra.get("bad_epochs", 0))
        self.epoch_step = int(extra.get("epoch_step", 0))
        self.history = list(extra.get("history", []))
        self.logger.info(f"Resumed {self.task} training from {path} at epoch {self.epoch}, step {self.step}")

    def _write_log(self):
        if self.out_dir is None or not self.history:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(self.history).to_json(self.out_dir / "train_log.jsonl", orient="records", lines=True)

    # loop

    def fit(self, train_samples: Sequence[Sample], val_samples: Optional[Sequence[Sample]] = None) -> TrainResult:
        if not train_samples:
            raise ValueError("Training needs at least one sample")
        dataset = self._dataset(train_samples)
        if self.cfg.resume_from is not None and self.step == 0:
            self.resume(self.cfg.resume_from)

        self.logger.info(
            f"Training {self.task} ({self.loss_kind}) on {len(dataset)} samples for up to {self.epochs} epochs, "
            f"batch {self.cfg.batch_size}, lr {self.cfg.learning_rate}"
        )
        best_path = self.out_dir / "best.pt" if self.out_dir is not None else None
        budget_spent = False
        for epoch in range(self.epoch, self.epochs):
            generator = torch.Generator().manual_seed(derive_seed(self.cfg.seed, epoch))
            loader = DataLoader(dataset, batch_size=self.cfg.batch_size, shuffle=True, generator=generator)
            self.model.train()
            skip, self.epoch_step = self.epoch_step, 0
            losses = [h["loss"] for h in self.history if h["epoch"] == epoch and "loss" in h] if skip else []
            for index, batch in enumerate(loader):
                if index < skip:
                    continue
                if self.cfg.max_steps is not None and self.step >= self.cfg.max_steps:
                    budget_spent = True
                    self.epoch_step = index
                    break
                torch.manual_seed(derive_seed(self.cfg.seed, epoch, self.step))
                batch = [t.to(self.device) for t in batch]
                self.optimizer.zero_grad()
                loss, extras = self._batch_loss(batch)
                loss.backward()
                self.optimizer.step()
                self.step += 1
                value = float(loss.detach())
                losses.append(value)
                lr = self.optimizer.param_groups[0]["lr"]
                self.history.append({"epoch": epoch, "step": self.step, "loss": value, "lr": lr, **extras})
                self.logger.debug(f"epoch {epoch} step {self.step}: loss {value:.6f}")
            if budget_spent and self.epoch_step > 0:
                self.epoch = epoch
                self.logger.info(f"Step budget {self.cfg.max_steps} spent after {self.epoch_step} batches of epoch {epoch}")
                break
            if not losses:
                break

            metrics = self.evaluate(val_samples) if val_samples else {"val_loss": float(np.mean(losses))}
            self.scheduler.step(metrics["val_loss"])
            self.epoch = epoch + 1
            self.history.append({"epoch": epoch, "step": self.step, **metrics})

            if self.best_val is None or metrics["val_loss"] < self.best_val:
                self.best_val = metrics["val_loss"]
                self.bad_epochs = 0
                self._save("best.pt")
            else:
                self.bad_epochs += 1
            if self.epoch % self.cfg.checkpoint_every == 0:
                self._save("last.pt")
            self._write_log()
            self.logger.info(
                f"epoch {epoch}: train loss {np.mean(losses):.6f}, val {metrics['val_loss']:.6f}, "
                f"best {self.best_val:.6f}, lr {self.optimizer.param_groups[0]['lr']:.2e}"
            )
            if self.bad_epochs >= self.cfg.early_stop_patience:
                self.logger.info(f"Early stop after {self.bad_epochs} epochs without improvement")
                break

        last_path = self._save("last.pt")
        self._write_log()
        return TrainResult(
            checkpoint=last_path,
            best_checkpoint=best_path if best_path is not None and best_path.exists() else None,
            best_val=self.best_val,
            steps=self.step,
            epochs=self.epoch,
            history=pd.DataFrame(self.history),
        )


def pretrain(
    model: EncoderDecoderNet,
    task: PretrainTask,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    out_dir=None,
    val_samples: Optional[Sequence[Sample]] = None,
    device: str = "cpu",
    metadata: Optional[Dict] = None,
) -> TrainResult:
    """Self-supervised warm-up on normalized fundus crops (no depth needed)."""
    if task.kind == "pseudo_depth":
        if model.cfg.out_channels != 1:
            raise ValueError(f"pseudo-depth pretraining needs a 1-channel head, model has {model.cfg.out_channels}")
        targets = [pseudo_depth_sample(s) for s in samples]
        val_targets = [pseudo_depth_sample(s) for s in val_samples] if val_samples else None
        trainer = Trainer(model, "pseudo_depth", cfg, "l2", out_dir, device=device, metadata=metadata)
        return trainer.fit(targets, val_targets)
    if model.cfg.out_channels != 3:
        raise ValueError(f"denoising pretraining needs a 3-channel head, model has {model.cfg.out_channels}")
    trainer = Trainer(
        model, "denoising", cfg, "l2", out_dir, noise_sigma=task.noise_sigma, device=device, metadata=metadata
    )
    return trainer.fit(list(samples), list(val_samples) if val_samples else None)


def train(
    model: EncoderDecoderNet,
    loss_kind: str,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    val_samples: Optional[Sequence[Sample]] = None,
    out_dir=None,
    device: str = "cpu",
    metadata: Optional[Dict] = None,
) -> TrainResult:
    task = "seg" if model.output_activation == "softmax" else "depth"
    if task == "seg" and loss_kind not in ("multiclass_ce", None):
        raise ValueError(f"segmentation trains with multiclass_ce, got '{loss_kind}'")
    if cfg.fine_tune_from is not None and cfg.resume_from is None:
        payload = load_checkpoint(cfg.fine_tune_from)
        check_compatible(model, payload)
        model.load_state_dict(payload["model_state"])
        logger.info(f"Fine-tuning from {cfg.fine_tune_from}")
    trainer = Trainer(model, task, cfg, loss_kind or "l2", out_dir, device=device, metadata=metadata)
    return trainer.fit(samples, val_samples)


def fine_tune(
    model: EncoderDecoderNet,
    checkpoint,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    loss_kind: str = "l2",
    val_samples: Optional[Sequence[Sample]] = None,
    out_dir=None,
    device: str = "cpu",
    metadata: Optional[Dict] = None,
) -> TrainResult:
    """Initialize from a compatible checkpoint, then train as usual."""
    cfg = cfg.model_copy(update={"fine_tune_from": Path(checkpoint)})
    return train(model, loss_kind, samples, cfg, val_samples, out_dir, device, metadata)


def warm_start(model: EncoderDecoderNet, checkpoint) -> Tuple[List[str], List[str]]:
    """Load every shape-compatible tensor of a (pretraining) checkpoint into ``model``."""
    payload = load_checkpoint(checkpoint)
    logger.info(f"Warm-starting from {payload['kind']} checkpoint {checkpoint}")
    return load_compatible_state(model, payload["model_state"])
