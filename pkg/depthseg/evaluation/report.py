"""Writers for per-sample tables, aggregate metrics and ROC curves."""

import json
import logging
import math
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from depthseg.evaluation.metrics import GLAUCOMA_CDR_THRESHOLD, MetricsReport, roc_auc, roc_curve_points  # noqa: E402

logger = logging.getLogger("depthseg")

DEPTH_COLUMNS = ("corr", "rmse")
SEG_COLUMNS = ("E_disc", "A_disc", "D_disc", "E_cup", "A_cup", "D_cup", "delta_E")
METRIC_COLUMNS = ("rmse", "corr") + SEG_COLUMNS + ("cdr_output", "cdr_gt")

REPORT_METADATA = {
    "rmse": "sqrt(mean squared difference) on min-max normalized depth",
    "overlap_error": "1 - |S∩G| / |S∪G|",
    "cdr": "inclusive vertical row extent, cup / disc",
    "glaucoma_threshold": GLAUCOMA_CDR_THRESHOLD,
}


def per_sample_frame(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    frame = pd.DataFrame([r.model_dump() for r in reports])
    if not frame.empty:
        frame = frame.sort_values("sample_id").reset_index(drop=True)
    return frame


def _finite(value):
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def aggregate(frame: pd.DataFrame, tau: Optional[float] = None, extra: Optional[Mapping] = None) -> Dict:
    """Mean and population std per metric, plus CDR-based AUC when glaucoma labels allow it."""
    metrics = {}
    for column in METRIC_COLUMNS:
        if column not in frame or frame[column].dropna().empty:
            continue
        values = frame[column].dropna().astype(float)
        metrics[column] = {"mean": _finite(values.mean()), "std": _finite(values.std(ddof=0)), "n": int(values.size)}

    auc = None
    if {"cdr_output", "glaucoma"} <= set(frame.columns):
        scored = frame.dropna(subset=["cdr_output", "glaucoma"])
        if scored["glaucoma"].astype(bool).nunique() == 2:
            auc = roc_auc(scored["cdr_output"].astype(float), scored["glaucoma"].astype(bool).astype(int))

    metadata = dict(REPORT_METADATA)
    if tau is not None:
        metadata["tau"] = tau
    metadata.update(extra or {})
    return {
        "n_samples": int(len(frame)),
        "disc_empty": int(frame["disc_empty"].sum()) if "disc_empty" in frame else 0,
        "metrics": metrics,
        "auc": _finite(auc),
        "metadata": metadata,
    }


def summary_table(aggregated: Dict, method: str = "model") -> pd.DataFrame:
    """One row per method, ``mean ± std`` cells for the depth or segmentation columns present."""
    row = {"method": method}
    for column in DEPTH_COLUMNS + SEG_COLUMNS:
        stats = aggregated["metrics"].get(column)
        if stats is not None and stats["mean"] is not None:
            row[column] = f"{stats['mean']:.4f} ± {(stats['std'] or 0.0):.4f}"
    if aggregated.get("auc") is not None:
        row["auc"] = f"{aggregated['auc']:.4f}"
    return pd.DataFrame([row])


def write_per_sample_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


def write_aggregate_json(aggregated: Dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(aggregated, fh, indent=2, sort_keys=True)
    logger.info(f"Aggregate metrics written to {path}")
    return path


def write_roc_csv(scores, labels, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    roc_curve_points(scores, labels).to_csv(path, index=False)
    return path


def plot_roc_curves(curves: Mapping[str, pd.DataFrame], path, title: str = "ROC of vertical CDR") -> Path:
    """Overlay ROC curves; each frame needs ``cdr_output`` and ``glaucoma`` columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, frame in curves.items():
        scored = frame.dropna(subset=["cdr_output", "glaucoma"])
        scores = scored["cdr_output"].astype(float)
        truth = scored["glaucoma"].astype(bool).astype(int)
        points = roc_curve_points(scores, truth)
        auc = roc_auc(scores, truth)
        ax.plot(points["fpr"], points["tpr"], label=f"{label} (AUC = {auc:.4f})")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"ROC plot written to {path}")
    return path
