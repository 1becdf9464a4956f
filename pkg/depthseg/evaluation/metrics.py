"""Depth and segmentation metrics, cup-to-disc ratio and glaucoma screening scores."""

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel
from sklearn.metrics import roc_auc_score, roc_curve

from depthseg.exceptions import ShapeMismatchError
from depthseg.schemas.sample_schema import CUP, DepthMap, LabelMap

GLAUCOMA_CDR_THRESHOLD = 0.6

ArrayLike = Union[np.ndarray, DepthMap]


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, DepthMap) else np.asarray(x, dtype=np.float64)


def _pair(x, y):
    x, y = _values(x), _values(y)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"shapes differ: {x.shape} vs {y.shape}")
    return x.astype(np.float64), y.astype(np.float64)


def _masks(S, G):
    S, G = np.asarray(S, dtype=bool), np.asarray(G, dtype=bool)
    if S.shape != G.shape:
        raise ShapeMismatchError(f"mask shapes differ: {S.shape} vs {G.shape}")
    return S, G


# Depth


def rmse(x: ArrayLike, y: ArrayLike) -> float:
    x, y = _pair(x, y)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def pearson_corr(x: ArrayLike, y: ArrayLike) -> float:
    x, y = _pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.sum(dx * dx), np.sum(dy * dy)
    if sxx <= 0 or syy <= 0:
        raise ValueError("Pearson correlation is undefined for a constant map")
    return float(np.clip(np.sum(dx * dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def minmax_normalize(depth: ArrayLike) -> np.ndarray:
    values = _values(depth).astype(np.float64)
    span = values.max() - values.min()
    if span <= 0:
        return np.zeros_like(values)
    return (values - values.min()) / span


def depth_metrics(pred: ArrayLike, gt: ArrayLike) -> dict:
    """RMSE and correlation on min-max normalized maps."""
    p, g = minmax_normalize(pred), minmax_normalize(gt)
    try:
        corr = pearson_corr(p, g)
    except ValueError:
        corr = None
    return {"rmse": rmse(p, g), "corr": corr}


# Segmentation


def overlap_error(S, G) -> float:
    """1 − |S∩G| / |S∪G|."""
    S, G = _masks(S, G)
    if not G.any():
        raise ValueError("overlap error is undefined for an empty ground-truth mask")
    return float(1.0 - np.logical_and(S, G).sum() / np.logical_or(S, G).sum())


@dataclass(frozen=True)
class BalancedAccuracy:
    accuracy: float
    sensitivity: float
    specificity: float


def balanced_accuracy(S, G) -> BalancedAccuracy:
    S, G = _masks(S, G)
    positives, negatives = G.sum(), (~G).sum()
    if positives == 0 or negatives == 0:
        raise ValueError("balanced accuracy needs ground truth with both positive and negative pixels")
    tp = np.logical_and(S, G).sum()
    tn = np.logical_and(~S, ~G).sum()
    sensitivity = tp / positives
    specificity = tn / negatives
    return BalancedAccuracy(float((sensitivity + specificity) / 2), float(sensitivity), float(specificity))


def dice(S, G) -> float:
    S, G = _masks(S, G)
    total = S.sum() + G.sum()
    if total == 0:
        raise ValueError("dice is undefined when both masks are empty")
    return float(2.0 * np.logical_and(S, G).sum() / total)


def masks_from_labels(labels) -> tuple:
    """(disc, cup): disc is rim ∪ cup."""
    array = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    return array >= 1, array == CUP


# CDR and screening


def vertical_cdr(disc, cup) -> float:
    """Inclusive vertical extent of cup over disc; 0 for an empty cup."""
    disc, cup = _masks(disc, cup)
    disc_rows = np.nonzero(disc.any(axis=1))[0]
    if disc_rows.size == 0:
        raise ValueError("vertical CDR is undefined for an empty disc")
    cup_rows = np.nonzero(cup.any(axis=1))[0]
    if cup_rows.size == 0:
        return 0.0
    return float((cup_rows.max() - cup_rows.min() + 1) / (disc_rows.max() - disc_rows.min() + 1))


def classify_glaucoma(cdr: float, threshold: float = GLAUCOMA_CDR_THRESHOLD) -> bool:
    return bool(cdr > threshold)


def _scores_labels(scores: Sequence[float], labels: Sequence[int]):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ShapeMismatchError(f"{scores.size} scores but {labels.size} labels")
    if np.unique(labels).size < 2:
        raise ValueError("ROC AUC needs both glaucomatous and healthy labels")
    return scores, labels


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve of CDR scores; tied scores count half."""
    scores, labels = _scores_labels(scores, labels)
    return float(roc_auc_score(labels, scores))


def roc_curve_points(scores: Sequence[float], labels: Sequence[int]) -> pd.DataFrame:
    scores, labels = _scores_labels(scores, labels)
    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    return pd.DataFrame({"fpr": fpr, "tpr": tpr, "threshold": thresholds})


class MetricsReport(BaseModel):
    """One row of the per-sample table; undefined metrics stay None."""

    sample_id: str
    rmse: Optional[float] = None
    corr: Optional[float] = None
    E_disc: Optional[float] = None
    E_cup: Optional[float] = None
    A_disc: Optional[float] = None
    A_cup: Optional[float] = None
    D_disc: Optional[float] = None
    D_cup: Optional[float] = None
    cdr_output: Optional[float] = None
    cdr_gt: Optional[float] = None
    delta_E: Optional[float] = None
    glaucoma: Optional[bool] = None
    disc_empty: bool = False


def _safe(fn, *args):
    try:
        return fn(*args)
    except ValueError:
        return None


def segmentation_metrics(sample_id: str, disc, cup, gt_labels, glaucoma: Optional[bool] = None) -> MetricsReport:
    """Compare predicted (disc, cup) masks with a ground-truth label map."""
    gt_disc, gt_cup = masks_from_labels(gt_labels)
    disc, cup = np.asarray(disc, dtype=bool), np.asarray(cup, dtype=bool)
    report = MetricsReport(sample_id=sample_id, glaucoma=glaucoma, disc_empty=not disc.any())
    report.E_disc = _safe(overlap_error, disc, gt_disc)
    report.E_cup = _safe(overlap_error, cup, gt_cup)
    disc_ba = _safe(balanced_accuracy, disc, gt_disc)
    cup_ba = _safe(balanced_accuracy, cup, gt_cup)
    report.A_disc = disc_ba.accuracy if disc_ba else None
    report.A_cup = cup_ba.accuracy if cup_ba else None
    report.D_disc = _safe(dice, disc, gt_disc)
    report.D_cup = _safe(dice, cup, gt_cup)
    report.cdr_output = None if report.disc_empty else vertical_cdr(disc, cup)
    report.cdr_gt = _safe(vertical_cdr, gt_disc, gt_cup)
    if report.cdr_output is not None and report.cdr_gt is not None:
        report.delta_E = abs(report.cdr_gt - report.cdr_output)
    return report
