"""Subcommands of the ``depthseg`` command line."""

from __future__ import annotations

import functools
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
import joblib
import numpy as np
import pandas as pd
from pydantic import ValidationError

from depthseg.cli.context import RunContext
from depthseg.crf.dense_crf import compute_unary, mean_field_refine
from depthseg.data.manifest import (
    LoadedDataset,
    load_dataset,
    load_depth_for_row,
    load_depth_map,
    load_fundus_image,
    load_label_map,
    load_sample,
    prepare_sample,
    read_manifest,
    read_manifests,
    resolve_canonical_stats,
    row_box,
    save_depth_npz,
    save_depth_png,
    save_image,
    save_label_png,
    save_mask_png,
)
from depthseg.data.pipeline import augment_all, crop_sample, make_splits, resize_array
from depthseg.data.synthetic import make_synthetic_corpus
from depthseg.evaluation.metrics import MetricsReport, depth_metrics, segmentation_metrics
from depthseg.evaluation.postprocess import masks_from_label_map, postprocess
from depthseg.evaluation.report import (
    aggregate,
    per_sample_frame,
    plot_roc_curves,
    summary_table,
    write_aggregate_json,
    write_per_sample_csv,
    write_roc_csv,
)
from depthseg.model.networks import build_depth_net, build_guided_seg_net, forward_depth, forward_seg
from depthseg.model.predictors import DepthEstimator, DiscCupSegmenter
from depthseg.preprocessing.pseudo_depth import make_pseudo_depth, pseudo_depth_guide
from depthseg.schemas.config_schema import CanonicalStats, RunConfig, load_run_config
from depthseg.schemas.sample_schema import DepthMap, LabelMap, ProbabilityMap, Sample
from depthseg.training.trainer import pretrain, train, warm_start

logger = logging.getLogger("depthseg")

MANIFEST = click.Path(exists=True, dir_okay=False, path_type=Path)
EXISTING_FILE = click.Path(exists=True, dir_okay=False, path_type=Path)


# flag name → dotted RunConfig field(s); flags left at None do not override
FLAG_FIELDS = {
    "seed": ("seed", "train.seed", "data.augment.seed"),
    "out": ("out_dir",),
    "manifest": ("manifests",),
    "loss": ("loss",),
    "block": ("network.block_kind",),
    "guide": ("guided.guide",),
    "base_filters": ("network.base_filters",),
    "resolution": ("network.input_resolution", "data.resolution"),
    "data_resolution": ("data.resolution",),
    "levels": ("network.encoder_levels", "guided.main_levels"),
    "guide_levels": ("guided.guide_levels",),
    "dropout_levels": ("network.dropout_levels",),
    "batch_size": ("train.batch_size",),
    "epochs": ("train.epochs",),
    "lr": ("train.learning_rate",),
    "max_steps": ("train.max_steps",),
    "fine_tune_from": ("train.fine_tune_from",),
    "resume_from": ("train.resume_from",),
    "device": ("train.device",),
    "pretrain": ("pretrain",),
    "task": ("pretrain",),
    "noise_sigma": ("noise_sigma",),
    "augment_multiplier": ("data.augment.multiplier",),
    "label_encoding": ("data.label_encoding",),
    "tau": ("tau",),
    "crf": ("use_crf",),
    "w1": ("crf.w1",),
    "w2": ("crf.w2",),
    "w3": ("crf.w3",),
    "theta_alpha": ("crf.theta_alpha",),
    "theta_beta": ("crf.theta_beta",),
    "theta_gamma": ("crf.theta_gamma",),
    "theta_smooth": ("crf.theta_smooth",),
    "lattice_step": ("crf.lattice_step",),
    "iters": ("crf.iterations",),
    "dry_run": ("dry_run",),
}


def build_overrides(flags: Dict[str, Any]) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for flag, fields in FLAG_FIELDS.items():
        value = flags.get(flag)
        if value is None or value == () or value is False:
            continue
        if isinstance(value, tuple):
            value = list(value)
        for dotted in fields:
            node = overrides
            *parents, leaf = dotted.split(".")
            for part in parents:
                node = node.setdefault(part, {})
            node[leaf] = value
    return overrides


def resolve_config(subcommand: str, flags: Dict[str, Any]) -> RunConfig:
    overrides = build_overrides(flags)
    overrides["subcommand"] = subcommand
    try:
        return load_run_config(flags.get("config"), overrides)
    except ValidationError as e:
        raise click.UsageError(f"Invalid configuration: {e}") from e


def pipeline(fn):
    """Resolve the config, honor --dry-run, map failures to exit code 1, write the run manifest."""

    @functools.wraps(fn)
    def wrapper(**flags):
        name = click.get_current_context().info_name
        cfg = resolve_config(name, flags)
        if cfg.dry_run:
            logger.info(f"Dry run of {name}: configuration is valid, nothing written")
            click.echo(f"{name}: configuration OK (dry run)")
            return
        try:
            run = RunContext(cfg)
            fn(cfg, run, flags)
            run.finish()
        except click.ClickException:
            raise
        except Exception as e:
            logger.error(f"Error in {name}: {e}")
            raise click.ClickException(str(e)) from e

    return wrapper


def common_options(fn):
    fn = click.option("--dry-run", is_flag=True, default=False, help="Validate the configuration and stop.")(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)(fn)
    fn = click.option("--config", type=EXISTING_FILE, default=None, help="YAML config file.")(fn)
    return fn


def network_options(fn):
    fn = click.option("--block", type=click.Choice(["residual", "dri"]), default=None)(fn)
    fn = click.option("--base-filters", type=int, default=None)(fn)
    fn = click.option("--resolution", type=int, default=None)(fn)
    fn = click.option("--levels", type=int, default=None, help="Encoder levels of the main branch.")(fn)
    fn = click.option("--dropout-levels", type=int, default=None)(fn)
    return fn


def train_options(fn):
    fn = click.option("--batch-size", type=int, default=None)(fn)
    fn = click.option("--epochs", type=int, default=None)(fn)
    fn = click.option("--lr", type=float, default=None)(fn)
    fn = click.option("--max-steps", type=int, default=None)(fn)
    fn = click.option("--resume-from", type=EXISTING_FILE, default=None)(fn)
    fn = click.option("--fine-tune-from", type=EXISTING_FILE, default=None)(fn)
    fn = click.option("--augment-multiplier", type=int, default=None)(fn)
    fn = click.option("--device", type=str, default=None)(fn)
    return fn


def crf_options(fn):
    fn = click.option("--crf", is_flag=True, default=False, help="Refine probabilities with the dense CRF.")(fn)
    for name in ("--w1", "--w2", "--w3", "--theta-alpha", "--theta-beta", "--theta-gamma", "--theta-smooth", "--lattice-step"):
        fn = click.option(name, type=float, default=None)(fn)
    fn = click.option("--iters", type=int, default=None)(fn)
    return fn


def _manifest_frame(cfg: RunConfig) -> pd.DataFrame:
    if not cfg.manifests:
        raise click.UsageError("at least one --manifest is required")
    return read_manifests(cfg.manifests)


def _metadata(data: LoadedDataset, **extra) -> Dict[str, Any]:
    meta = {"canonical_stats": data.stats.model_dump(mode="json")}
    if data.depth_range is not None:
        meta["depth_range"] = [float(v) for v in data.depth_range]
    meta.update(extra)
    return meta


def _stats_from(metadata: Dict[str, Any]) -> Optional[CanonicalStats]:
    stats = metadata.get("canonical_stats")
    return CanonicalStats(**stats) if stats else None


def _write_reports(run: RunContext, reports: List[MetricsReport], tau: Optional[float], method: str):
    frame = per_sample_frame(reports)
    run.record(write_per_sample_csv(frame, run.path("per_sample.csv")))
    aggregated = aggregate(frame, tau=tau)
    run.record(write_aggregate_json(aggregated, run.path("metrics.json")))
    run.record(write_per_sample_csv(summary_table(aggregated, method), run.path("summary.csv")))
    if aggregated["auc"] is not None:
        scored = frame.dropna(subset=["cdr_output", "glaucoma"])
        run.record(write_roc_csv(scored["cdr_output"].astype(float), scored["glaucoma"].astype(bool).astype(int), run.path("roc.csv")))
        run.record(plot_roc_curves({method: frame}, run.path("roc.png")))
    run.summary.update({k: v for k, v in aggregated.items() if k in ("n_samples", "auc")})
    return aggregated


def _rounds(ids: List[str], mode: str, folds: Optional[int], fold: str, seed: int, run: RunContext):
    """(name, train_ids, test_ids) per training round."""
    if mode == "none":
        return [("all", sorted(ids), [])]
    split = make_splits(ids, mode=mode, fold_count=folds or 5, seed=seed)
    run.record(joblib.dump(split.model_dump(mode="json"), run.path("splits.joblib"))[0])
    if mode == "half":
        chosen = [0]
    elif fold == "all":
        chosen = list(range(split.fold_count))
    else:
        chosen = [int(fold)]
        if not 0 <= chosen[0] < split.fold_count:
            raise click.UsageError(f"--fold must lie in 0..{split.fold_count - 1}, got {fold}")
    return [(f"fold_{f}", split.train_ids(f), split.test_ids(f)) for f in chosen]


def _pretrain_checkpoint(cfg: RunConfig, run: RunContext, data: LoadedDataset, pool_manifests) -> Optional[Path]:
    task = cfg.pretrain_task()
    if task is None:
        return None
    if pool_manifests:
        pool = load_dataset(read_manifests(pool_manifests), cfg.data, stats=data.stats).samples
    else:
        pool = data.samples
    out_channels = 3 if task.kind == "denoising" else 1
    model = build_depth_net(cfg.network.model_copy(update={"out_channels": out_channels}), seed=cfg.seed)
    result = pretrain(model, task, pool, cfg.train, out_dir=run.path("pretrain"), device=cfg.train.device, metadata=_metadata(data))
    run.record(result.checkpoint)
    return result.checkpoint


# commands


@click.command("synthesize")
@common_options
@click.option("--count", type=int, default=20, show_default=True)
@click.option("--size", type=int, default=64, show_default=True, help="Side of the synthetic images.")
@click.option("--no-vessels", is_flag=True, default=False)
@pipeline
def synthesize(cfg: RunConfig, run: RunContext, flags):
    """Write a synthetic dataset (image, depth, labels) and its manifest."""
    rows = []
    for case in make_synthetic_corpus(flags["count"], flags["size"], seed=cfg.seed, vessels=not flags["no_vessels"]):
        sid = case.image.source_id
        save_image(case.image.pixels, run.path("images", f"{sid}.png"))
        save_depth_png(case.depth, run.path("depth", f"{sid}.png"))
        save_label_png(case.labels, run.path("labels", f"{sid}.png"))
        rows.append(
            {
                "id": sid,
                "image": f"images/{sid}.png",
                "depth": f"depth/{sid}.png",
                "label": f"labels/{sid}.png",
                "depth_min": 0.0,
                "depth_max": 1.0,
                "glaucoma": int(case.glaucoma),
            }
        )
    manifest = run.path("manifest.csv")
    pd.DataFrame(rows).to_csv(manifest, index=False)
    run.record(manifest)
    run.summary["count"] = len(rows)


@click.command("pseudo-depth")
@common_options
@click.option("--manifest", type=MANIFEST, multiple=True, required=True)
@click.option("--resolution", "data_resolution", type=int, default=None, help="Working resolution of the ROI crop.")
@pipeline
def pseudo_depth(cfg: RunConfig, run: RunContext, flags):
    """Pseudo-depth image and vessel mask for every manifest row."""
    data = load_dataset(_manifest_frame(cfg), cfg.data)
    for sample in data.samples:
        pseudo = make_pseudo_depth(sample.image)
        run.record(save_depth_png(pseudo, run.path(f"{sample.source_id}_pseudo_depth.png")))
        run.record(save_mask_png(pseudo.vessel_mask, run.path(f"{sample.source_id}_vessels.png")))
    run.summary["count"] = len(data.samples)


@click.command("pretrain")
@common_options
@network_options
@train_options
@click.option("--manifest", type=MANIFEST, multiple=True, required=True, help="Repeat to pool datasets.")
@click.option("--task", type=click.Choice(["denoising", "pseudo_depth"]), required=True)
@click.option("--noise-sigma", type=float, default=None)
@pipeline
def pretrain_command(cfg: RunConfig, run: RunContext, flags):
    """Self-supervised pretraining of the depth network."""
    data = load_dataset(_manifest_frame(cfg), cfg.data)
    checkpoint = _pretrain_checkpoint(cfg, run, data, None)
    run.summary["checkpoint"] = str(checkpoint)


@click.command("train-depth")
@common_options
@network_options
@train_options
@click.option("--manifest", type=MANIFEST, multiple=True, required=True)
@click.option("--loss", type=click.Choice(["l2", "l1", "berhu"]), default=None)
@click.option("--pretrain", type=click.Choice(["none", "denoising", "pseudo_depth"]), default=None)
@click.option("--pretrain-manifest", type=MANIFEST, multiple=True, help="Pool used for pretraining (default: --manifest).")
@click.option("--noise-sigma", type=float, default=None)
@click.option("--folds", type=int, default=None, help="k-fold cross validation.")
@click.option("--fold", type=str, default="all", show_default=True)
@pipeline
def train_depth(cfg: RunConfig, run: RunContext, flags):
    """Train the depth network, optionally after pretraining and with k-fold evaluation."""
    data = load_dataset(_manifest_frame(cfg), cfg.data)
    missing = [s.source_id for s in data.samples if s.kind != "depth"]
    if missing:
        raise ValueError(f"train-depth needs depth ground truth; missing for {missing[:5]}")
    pretrained = _pretrain_checkpoint(cfg, run, data, flags.get("pretrain_manifest"))

    mode = "kfold" if flags.get("folds") else "none"
    reports: List[MetricsReport] = []
    for name, train_ids, test_ids in _rounds(data.ids, mode, flags.get("folds"), flags["fold"], cfg.seed, run):
        model = build_depth_net(cfg.network, seed=cfg.seed)
        if pretrained is not None:
            warm_start(model, pretrained)
        samples = augment_all(data.subset(train_ids), cfg.data.augment)
        out_dir = run.path("depth" if name == "all" else f"depth_{name}")
        result = train(model, cfg.loss, samples, cfg.train, out_dir=out_dir, device=cfg.train.device, metadata=_metadata(data))
        run.record(result.checkpoint)
        run.record(out_dir / "train_log.jsonl")
        for sample in data.subset(test_ids):
            predicted = forward_depth(model, sample.image)
            save_depth_png(predicted, run.path("predictions", f"{sample.source_id}_depth.png"))
            reports.append(MetricsReport(sample_id=sample.source_id, **depth_metrics(predicted, sample.target)))
    if reports:
        _write_reports(run, reports, None, f"{cfg.network.block_kind}-{cfg.loss}-{cfg.pretrain}")


def _with_guides(data: LoadedDataset, cfg: RunConfig, depth_checkpoint: Optional[Path]) -> List[Sample]:
    guide = cfg.guided.guide
    if guide == "none":
        return data.samples
    if guide == "pseudo_depth":
        return [pseudo_depth_guide(s) for s in data.samples]
    estimator = DepthEstimator(depth_checkpoint, cfg.train.device) if depth_checkpoint else None
    samples = []
    for sample in data.samples:
        if sample.guide is None:
            if estimator is None:
                raise ValueError(f"'{sample.source_id}' has no depth; pass --depth-checkpoint to estimate guides")
            sample = Sample(sample.image, sample.target, estimator.predict(sample.image), sample.glaucoma)
        samples.append(sample)
    return samples


@click.command("train-seg")
@common_options
@network_options
@train_options
@click.option("--manifest", type=MANIFEST, multiple=True, required=True)
@click.option("--guide", type=click.Choice(["none", "depth", "pseudo_depth"]), default=None)
@click.option("--guide-levels", type=int, default=None)
@click.option("--depth-checkpoint", type=EXISTING_FILE, default=None, help="Depth net used when ground-truth depth is absent.")
@click.option("--split", type=click.Choice(["none", "half", "kfold"]), default="none", show_default=True)
@click.option("--folds", type=int, default=None)
@click.option("--fold", type=str, default="all", show_default=True)
@click.option("--tau", type=float, default=None)
@click.option("--label-encoding", type=click.Choice(["index", "grayscale"]), default=None)
@pipeline
def train_seg(cfg: RunConfig, run: RunContext, flags):
    """Train the (depth-guided) disc/cup segmentation network."""
    data = load_dataset(_manifest_frame(cfg), cfg.data, with_depth_guide=cfg.guided.guide == "depth")
    missing = [s.source_id for s in data.samples if s.kind != "label"]
    if missing:
        raise ValueError(f"train-seg needs label maps; missing for {missing[:5]}")
    samples = LoadedDataset(_with_guides(data, cfg, flags.get("depth_checkpoint")), data.stats, data.depth_range)

    reports: List[MetricsReport] = []
    rounds = _rounds(samples.ids, flags["split"], flags.get("folds"), flags["fold"], cfg.seed, run)
    for name, train_ids, test_ids in rounds:
        model = build_guided_seg_net(cfg.network, cfg.guided, seed=cfg.seed)
        augmented = augment_all(samples.subset(train_ids), cfg.data.augment)
        out_dir = run.path("seg" if name == "all" else f"seg_{name}")
        result = train(
            model,
            "multiclass_ce",
            augmented,
            cfg.train,
            out_dir=out_dir,
            device=cfg.train.device,
            metadata=_metadata(data, guide=cfg.guided.guide),
        )
        run.record(result.checkpoint)
        for sample in samples.subset(test_ids):
            prob = forward_seg(model, sample.image, sample.guide)
            masks = postprocess(prob, cfg.tau)
            save_label_png(masks.to_labels(sample.source_id), run.path("predictions", f"{sample.source_id}_labels.png"))
            reports.append(segmentation_metrics(sample.source_id, masks.disc, masks.cup, sample.target, sample.glaucoma))
    if reports:
        _write_reports(run, reports, cfg.tau, f"{cfg.guided.guide}-{cfg.network.block_kind}")


def _inference_data(cfg: RunConfig, resolution: int, metadata: Dict[str, Any], with_depth_guide: bool = False):
    frame = _manifest_frame(cfg)
    data_cfg = cfg.data.model_copy(update={"resolution": resolution})
    stats = _stats_from(metadata) or resolve_canonical_stats(frame, data_cfg)
    # depth guides are scaled with the training range, not this manifest's
    depth_range = metadata.get("depth_range")
    data = load_dataset(frame, data_cfg, stats=stats, with_depth_guide=with_depth_guide, depth_range=depth_range)
    return frame, data_cfg, data


@click.command("infer-depth")
@common_options
@click.option("--checkpoint", type=EXISTING_FILE, required=True)
@click.option("--manifest", type=MANIFEST, multiple=True, required=True)
@pipeline
def infer_depth(cfg: RunConfig, run: RunContext, flags):
    """One 16-bit depth PNG and one float .npz per manifest row."""
    estimator = DepthEstimator(flags["checkpoint"], cfg.train.device)
    _, _, data = _inference_data(cfg, estimator.resolution, estimator.metadata)
    for sample in data.samples:
        depth = estimator.predict(sample.image)
        run.record(save_depth_png(depth, run.path(f"{sample.source_id}_depth.png")))
        run.record(save_depth_npz(depth, run.path(f"{sample.source_id}_depth.npz")))
    run.summary["count"] = len(data.samples)


@click.command("infer-seg")
@common_options
@crf_options
@click.option("--checkpoint", type=EXISTING_FILE, required=True)
@click.option("--manifest", type=MANIFEST, multiple=True, required=True)
@click.option("--depth-checkpoint", type=EXISTING_FILE, default=None)
@click.option("--tau", type=float, default=None)
@pipeline
def infer_seg(cfg: RunConfig, run: RunContext, flags):
    """Probability container, ROI crop and post-processed label PNG per manifest row."""
    estimator = DepthEstimator(flags["depth_checkpoint"], cfg.train.device) if flags.get("depth_checkpoint") else None
    segmenter = DiscCupSegmenter(flags["checkpoint"], estimator, cfg.train.device)
    frame, data_cfg, data = _inference_data(cfg, segmenter.resolution, segmenter.metadata, segmenter.guide_kind == "depth")
    rows = {str(row["id"]): row for _, row in frame.iterrows()}
    for sample in data.samples:
        sid = sample.source_id
        guide = segmenter.guide_for(sample)
        prob = segmenter.predict(Sample(sample.image, sample.target, guide, sample.glaucoma))
        raw = prepare_sample(rows[sid], data_cfg).image.pixels
        run.record(save_image(raw, run.path(f"{sid}_roi.png")))
        if cfg.use_crf:
            refined, _ = mean_field_refine(compute_unary(prob), raw * 255.0, guide, cfg.crf)
            prob = ProbabilityMap(refined.probs, sid)
        run.record(joblib.dump({"source_id": sid, "probs": prob.probs}, run.path(f"{sid}_prob.joblib"))[0])
        masks = postprocess(prob, cfg.tau)
        run.record(save_label_png(masks.to_labels(sid), run.path(f"{sid}_labels.png")))
    run.summary["count"] = len(data.samples)


@click.command("crf-refine")
@common_options
@crf_options
@click.option("--prob", "prob_path", type=EXISTING_FILE, required=True, help="Probability container from infer-seg.")
@click.option("--image", "image_path", type=EXISTING_FILE, required=True, help="ROI image (e.g. <id>_roi.png).")
@click.option("--depth", "depth_path", type=EXISTING_FILE, default=None)
@pipeline
def crf_refine(cfg: RunConfig, run: RunContext, flags):
    """Dense-CRF refinement of one probability map."""
    container = joblib.load(flags["prob_path"])
    prob = ProbabilityMap(container["probs"], container.get("source_id", Path(flags["prob_path"]).stem))
    shape = prob.probs.shape[:2]
    image = resize_array(load_fundus_image(flags["image_path"]).pixels, shape, order=1)
    depth = None
    if flags.get("depth_path"):
        depth = resize_array(load_depth_map(flags["depth_path"]).values, shape, order=1)
    refined, labels = mean_field_refine(compute_unary(prob), image * 255.0, depth, cfg.crf)
    sid = prob.source_id
    run.record(save_label_png(LabelMap(labels.labels, sid), run.path(f"{sid}_crf_labels.png")))
    run.record(joblib.dump({"source_id": sid, "probs": refined.probs}, run.path(f"{sid}_crf_prob.joblib"))[0])


def _ground_truth(row: pd.Series, cfg: RunConfig, shape) -> Sample:
    """Manifest sample cropped to its ROI and resized to the prediction grid."""
    sample = load_sample(row, cfg.data)
    if isinstance(sample.target, LabelMap):
        sample.guide = load_depth_for_row(row, cfg.data)
    box = row_box(row, sample.image.height, sample.image.width)
    return crop_sample(sample, box, resolution=shape[0])


@click.command("evaluate")
@common_options
@click.option("--manifest", type=MANIFEST, multiple=True, required=True, help="Ground-truth manifest.")
@click.option("--pred-dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--tau", type=float, default=None)
@click.option("--label-encoding", type=click.Choice(["index", "grayscale"]), default=None)
@pipeline
def evaluate(cfg: RunConfig, run: RunContext, flags):
    """Per-sample metrics, aggregate JSON, summary table and ROC for a prediction directory."""
    pred_dir: Path = flags["pred_dir"]
    reports: List[MetricsReport] = []
    for _, row in _manifest_frame(cfg).iterrows():
        sid = str(row["id"])
        labels_path, prob_path, depth_path = (
            pred_dir / f"{sid}_labels.png",
            pred_dir / f"{sid}_prob.joblib",
            pred_dir / f"{sid}_depth.png",
        )
        masks = None
        if labels_path.exists():
            masks = masks_from_label_map(load_label_map(labels_path, "index", sid))
        elif prob_path.exists():
            masks = postprocess(ProbabilityMap(joblib.load(prob_path)["probs"], sid), cfg.tau)
        predicted_depth = load_depth_map(depth_path, source_id=sid) if depth_path.exists() else None
        if masks is None and predicted_depth is None:
            logger.warning(f"No prediction for '{sid}' in {pred_dir}")
            continue

        shape = masks.disc.shape if masks is not None else predicted_depth.shape
        truth = _ground_truth(row, cfg, shape)
        report = MetricsReport(sample_id=sid, glaucoma=truth.glaucoma)
        if masks is not None and isinstance(truth.target, LabelMap):
            report = segmentation_metrics(sid, masks.disc, masks.cup, truth.target, truth.glaucoma)
        gt_depth = truth.target if isinstance(truth.target, DepthMap) else truth.guide
        if predicted_depth is not None and gt_depth is not None:
            metrics = depth_metrics(predicted_depth, gt_depth)
            report.rmse, report.corr = metrics["rmse"], metrics["corr"]
        reports.append(report)
    if not reports:
        raise ValueError(f"No predictions found in {pred_dir}")
    _write_reports(run, reports, cfg.tau, "evaluation")


@click.command("roc-plot")
@common_options
@click.option("--input", "inputs", multiple=True, required=True, help="LABEL=per_sample.csv; repeat to overlay curves.")
@pipeline
def roc_plot(cfg: RunConfig, run: RunContext, flags):
    """Overlay CDR ROC curves of several evaluated methods."""
    curves = {}
    for item in flags["inputs"]:
        label, sep, path = item.partition("=")
        if not sep or not path:
            raise click.UsageError(f"--input expects LABEL=PATH, got '{item}'")
        if not Path(path).exists():
            raise click.UsageError(f"per-sample CSV not found: {path}")
        curves[label] = pd.read_csv(path)
    run.record(plot_roc_curves(curves, run.path("roc.png")))
    aucs = {}
    for label, frame in curves.items():
        aucs[label] = aggregate(frame)["auc"]
    run.summary["auc"] = aucs


COMMANDS = (
    synthesize,
    pseudo_depth,
    pretrain_command,
    train_depth,
    train_seg,
    infer_depth,
    infer_seg,
    crf_refine,
    evaluate,
    roc_plot,
)
