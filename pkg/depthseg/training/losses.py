"""Regression and classification losses.

Regression losses are sums over all elements of the batch (no averaging), so a
single residual ``(3, 4)`` gives an L2 loss of 5.
"""

from typing import Callable, Dict

import torch
import torch.nn.functional as F

from depthseg.exceptions import ShapeMismatchError

BERHU_FRACTION = 0.2
PROB_FLOOR = 1e-12


def _residual(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction shape {tuple(pred.shape)} does not match target {tuple(gt.shape)}")
    return pred - gt


def loss_l2(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(_residual(pred, gt))


def loss_l1(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return _residual(pred, gt).abs().sum()


def berhu_threshold(residual: torch.Tensor) -> torch.Tensor:
    """c = 0.2 · max |residual| over the whole batch, detached from the graph."""
    return BERHU_FRACTION * residual.detach().abs().max()


def berhu(residual: torch.Tensor, c) -> torch.Tensor:
    """Element-wise reverse Huber: |x| for |x| <= c, (x² + c²) / 2c above."""
    c = torch.as_tensor(c, dtype=residual.dtype, device=residual.device)
    magnitude = residual.abs()
    # guards the unused branch when c == 0 (then every residual is 0)
    safe_c = torch.clamp(c, min=torch.finfo(residual.dtype).tiny)
    quadratic = (magnitude**2 + c**2) / (2 * safe_c)
    return torch.where(magnitude <= c, magnitude, quadratic)


def loss_berhu(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    residual = _residual(pred, gt)
    if residual.numel() == 0:
        raise ValueError("berHu loss needs a nonempty batch of residuals")
    return berhu(residual, berhu_threshold(residual)).sum()


def loss_multiclass_ce(
    prob: torch.Tensor,
    labels: torch.Tensor,
    reduction: str = "mean",
    from_logits: bool = False,
) -> torch.Tensor:
    """Negative log-likelihood of the true class.

    Args:
        prob: N×C×H×W probabilities (or logits with ``from_logits=True``)
        labels: N×H×W integer labels in 0..C-1
        reduction: "mean" over pixels or "sum"
    """
    if prob.dim() != 4 or labels.shape != (prob.shape[0],) + tuple(prob.shape[2:]):
        raise ShapeMismatchError(f"expected N×C×H×W scores and N×H×W labels, got {tuple(prob.shape)} and {tuple(labels.shape)}")
    num_classes = prob.shape[1]
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must lie in 0..{num_classes - 1}, got range [{int(labels.min())}, {int(labels.max())}]"
        )
    if from_logits:
        log_prob = F.log_softmax(prob, dim=1)
    else:
        log_prob = torch.log(prob.clamp_min(PROB_FLOOR))
    nll = -log_prob.gather(1, labels.unsqueeze(1)).squeeze(1)
    if reduction == "mean":
        return nll.mean()
    if reduction == "sum":
        return nll.sum()
    raise ValueError(f"Unknown reduction '{reduction}', expected 'mean' or 'sum'")


REGRESSION_LOSSES: Dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = {
    "l2": loss_l2,
    "l1": loss_l1,
    "berhu": loss_berhu,
}


def regression_loss(name: str):
    if name not in REGRESSION_LOSSES:
        raise ValueError(f"Unknown regression loss '{name}', expected one of {sorted(REGRESSION_LOSSES)}")
    return REGRESSION_LOSSES[name]
