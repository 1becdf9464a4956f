import numpy as np
import pandas as pd
import pytest
import torch

from depthseg.data.pipeline import canonical_stats_from_image, normalize_sample
from depthseg.data.synthetic import make_synthetic_corpus
from depthseg.exceptions import CheckpointError
from depthseg.model.checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from depthseg.model.networks import build_depth_net, build_guided_seg_net
from depthseg.preprocessing.pseudo_depth import pseudo_depth_sample
from depthseg.schemas.config_schema import PretrainTask, TrainConfig
from depthseg.schemas.sample_schema import Sample
from depthseg.training.datasets import DenoisingDataset, SegDataset
from depthseg.training.trainer import Trainer, derive_seed, fine_tune, pretrain, train, warm_start


def _cfg(**overrides):
    values = dict(batch_size=2, epochs=3, learning_rate=1e-3, betas=(0.9, 0.999), seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def test_derive_seed_is_deterministic_and_order_sensitive():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(2, 1)


def test_denoising_targets_lie_in_unit_range(small_depth_samples):
    image, target = DenoisingDataset(small_depth_samples)[0]
    assert image.shape == target.shape == (3, 32, 32)
    assert float(target.min()) == 0.0 and float(target.max()) == 1.0


def test_seg_dataset_requires_guides_for_guided_nets(small_depth_samples, small_seg_samples):
    with pytest.raises(ValueError):
        SegDataset(small_depth_samples, guided=False)
    unguided = [Sample(s.image, s.target, None, s.glaucoma) for s in small_seg_samples]
    with pytest.raises(ValueError, match="no guide"):
        SegDataset(unguided, guided=True)
    _, guide, labels = SegDataset(unguided, guided=False)[0]
    assert guide.numel() == 0 and labels.shape == (32, 32)


def test_training_writes_checkpoints_and_log(tmp_path, tiny_network, small_depth_samples):
    model = build_depth_net(tiny_network, seed=0)
    result = train(model, "berhu", small_depth_samples, _cfg(), out_dir=tmp_path, metadata={"note": "x"})
    assert result.epochs == 3 and result.steps == 3
    assert (tmp_path / "best.pt").exists() and (tmp_path / "last.pt").exists()
    log = pd.read_json(tmp_path / "train_log.jsonl", lines=True)
    assert log["loss"].dropna().size == 3
    payload = load_checkpoint(tmp_path / "last.pt")
    assert payload["kind"] == "depth"
    assert payload["extra"]["loss_kind"] == "berhu"
    assert payload["extra"]["metadata"] == {"note": "x"}


def test_max_steps_bounds_training(tiny_network, small_depth_samples):
    model = build_depth_net(tiny_network, seed=0)
    result = train(model, "l2", small_depth_samples, _cfg(epochs=50, max_steps=4, batch_size=1))
    assert result.steps == 4


def test_budget_stop_mid_epoch_resumes_the_same_epoch(tmp_path, tiny_network, small_depth_samples):
    full = train(build_depth_net(tiny_network, seed=0), "l2", small_depth_samples, _cfg(epochs=3, batch_size=1))

    stopped = train(
        build_depth_net(tiny_network, seed=0),
        "l2",
        small_depth_samples,
        _cfg(epochs=3, batch_size=1, max_steps=3),
        out_dir=tmp_path,
    )
    assert stopped.steps == 3 and stopped.epochs == 1
    payload = load_checkpoint(tmp_path / "last.pt")
    assert payload["epoch"] == 1 and payload["extra"]["epoch_step"] == 1
    assert [row["epoch"] for row in payload["extra"]["history"] if "val_loss" in row] == [0]

    resumed = train(
        build_depth_net(tiny_network, seed=7),
        "l2",
        small_depth_samples,
        _cfg(epochs=3, batch_size=1, resume_from=tmp_path / "last.pt"),
    )
    assert resumed.steps == full.steps == 6
    assert resumed.epochs == 3
    assert resumed.step_losses() == full.step_losses()


def test_zero_learning_rate_leaves_parameters_unchanged(tiny_network, small_depth_samples):
    model = build_depth_net(tiny_network, seed=0)
    before = [p.detach().clone() for p in model.parameters()]
    train(model, "l2", small_depth_samples, _cfg(epochs=2, learning_rate=0.0))
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_one_step_of_guided_training_moves_the_guide_branch(tiny_network, tiny_guided, small_seg_samples):
    model = build_guided_seg_net(tiny_network, tiny_guided, seed=0)
    before = [p.detach().clone() for p in model.guide_parameters()]
    result = train(model, "multiclass_ce", small_seg_samples, _cfg(batch_size=1, max_steps=1))
    assert result.steps == 1
    assert any(not torch.equal(a, b) for a, b in zip(before, model.guide_parameters()))


def test_noise_free_denoising_loss_decreases(tiny_network):
    samples = [case.depth_sample() for case in make_synthetic_corpus(4, resolution=32, seed=3)]
    stats = canonical_stats_from_image(samples[0].image)
    samples = [normalize_sample(s, stats) for s in samples]
    model = build_depth_net(tiny_network.model_copy(update={"out_channels": 3}), seed=0)
    cfg = _cfg(batch_size=4, epochs=50, max_steps=50, early_stop_patience=50, plateau_patience=50)
    losses = Trainer(model, "denoising", cfg, noise_sigma=0.0).fit(samples).step_losses()
    assert len(losses) == 50
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_same_seed_gives_identical_loss_traces(tiny_network, small_depth_samples):
    runs = []
    for _ in range(2):
        model = build_depth_net(tiny_network.model_copy(update={"dropout_levels": 1}), seed=0)
        runs.append(train(model, "l1", small_depth_samples, _cfg(epochs=4, batch_size=1)).step_losses())
    assert runs[0] == runs[1]


def test_resume_continues_bit_identically(tmp_path, tiny_network, small_depth_samples):
    network = tiny_network.model_copy(update={"dropout_levels": 1})
    full = train(build_depth_net(network, seed=0), "l2", small_depth_samples, _cfg(epochs=4, batch_size=1))

    train(build_depth_net(network, seed=0), "l2", small_depth_samples, _cfg(epochs=2, batch_size=1), out_dir=tmp_path / "half")
    resumed_model = build_depth_net(network, seed=5)
    resumed = train(
        resumed_model,
        "l2",
        small_depth_samples,
        _cfg(epochs=4, batch_size=1, resume_from=tmp_path / "half" / "last.pt"),
    )
    assert resumed.step_losses() == full.step_losses()
    assert resumed.steps == full.steps == 8


def test_resume_rejects_other_task(tmp_path, tiny_network, small_depth_samples):
    train(build_depth_net(tiny_network, seed=0), "l2", small_depth_samples, _cfg(epochs=1), out_dir=tmp_path)
    trainer = Trainer(build_depth_net(tiny_network.model_copy(update={"out_channels": 3})), "denoising", _cfg())
    with pytest.raises(ValueError):
        trainer.resume(tmp_path / "last.pt")


def test_segmentation_rejects_regression_loss(tiny_network, tiny_guided, small_seg_samples):
    model = build_guided_seg_net(tiny_network, tiny_guided)
    with pytest.raises(ValueError, match="multiclass_ce"):
        train(model, "l2", small_seg_samples, _cfg())


def test_pretraining_heads_are_checked(tiny_network, small_depth_samples):
    with pytest.raises(ValueError, match="1-channel"):
        pretrain(
            build_depth_net(tiny_network.model_copy(update={"out_channels": 3})),
            PretrainTask(kind="pseudo_depth"),
            small_depth_samples,
            _cfg(),
        )
    with pytest.raises(ValueError, match="3-channel"):
        pretrain(build_depth_net(tiny_network), PretrainTask(kind="denoising", noise_sigma=0.1), small_depth_samples, _cfg())


def test_denoising_noise_sigma_defaults_and_validation():
    assert PretrainTask(kind="denoising").noise_sigma == pytest.approx(0.1)
    with pytest.raises(ValueError):
        PretrainTask(kind="denoising", noise_sigma=-1.0)


def test_pretrain_then_warm_start(tmp_path, tiny_network, small_depth_samples):
    denoiser = build_depth_net(tiny_network.model_copy(update={"out_channels": 3}), seed=0)
    result = pretrain(denoiser, PretrainTask(kind="denoising", noise_sigma=0.1), small_depth_samples, _cfg(), out_dir=tmp_path)
    assert load_checkpoint(result.checkpoint)["kind"] == "pretrain-denoising"

    model = build_depth_net(tiny_network, seed=1)
    loaded, skipped = warm_start(model, result.checkpoint)
    assert set(skipped) == {"head.weight", "head.bias"}
    torch.testing.assert_close(model.encoder[0].down.conv.weight, denoiser.encoder[0].down.conv.weight)


def test_fine_tune_requires_compatible_checkpoint(tmp_path, tiny_network, tiny_guided, small_seg_samples):
    seg = build_guided_seg_net(tiny_network, tiny_guided, seed=0)
    first = train(seg, "multiclass_ce", small_seg_samples, _cfg(epochs=1), out_dir=tmp_path / "a")

    again = build_guided_seg_net(tiny_network, tiny_guided, seed=9)
    result = fine_tune(again, first.checkpoint, small_seg_samples, _cfg(epochs=1), "multiclass_ce", out_dir=tmp_path / "b")
    assert result.steps == 1

    wider = build_guided_seg_net(tiny_network.model_copy(update={"base_filters": 4}), tiny_guided)
    with pytest.raises(CheckpointError, match="base_filters"):
        fine_tune(wider, first.checkpoint, small_seg_samples, _cfg(epochs=1), "multiclass_ce")


def test_checkpoint_round_trip_and_corruption(tmp_path, tiny_network, tiny_guided):
    model = build_guided_seg_net(tiny_network, tiny_guided, seed=0)
    path = save_checkpoint(tmp_path / "seg.pt", model, "seg")
    restored = model_from_checkpoint(load_checkpoint(path))
    assert restored.fusion_points == model.fusion_points
    for key, value in model.state_dict().items():
        torch.testing.assert_close(restored.state_dict()[key], value)

    (tmp_path / "broken.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "broken.pt")
    torch.save({"header": {"format": "depthseg-checkpoint", "version": 99}}, tmp_path / "future.pt")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "future.pt")
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "x.pt", model, "classifier")


@pytest.mark.slow
def test_depth_net_overfits_two_pairs(tiny_network, small_depth_samples):
    model = build_depth_net(tiny_network, seed=0)
    cfg = _cfg(epochs=500, max_steps=500, early_stop_patience=500, plateau_patience=50)
    trainer = Trainer(model, "depth", cfg, "l2")
    trainer.fit(small_depth_samples)
    assert trainer.evaluate(small_depth_samples)["val_rmse"] < 0.05


@pytest.mark.slow
def test_guided_seg_net_overfits_two_pairs(tiny_network, tiny_guided, small_seg_samples):
    model = build_guided_seg_net(tiny_network, tiny_guided, seed=0)
    cfg = _cfg(epochs=500, max_steps=500, early_stop_patience=500, plateau_patience=50)
    trainer = Trainer(model, "seg", cfg)
    trainer.fit(small_seg_samples)
    assert trainer.evaluate(small_seg_samples)["val_ce"] < 0.01


@pytest.mark.slow
def test_pseudo_depth_pretraining_overfits_two_images(tiny_network, small_depth_samples):
    model = build_depth_net(tiny_network, seed=0)
    targets = [pseudo_depth_sample(s) for s in small_depth_samples]
    cfg = _cfg(epochs=500, max_steps=500, early_stop_patience=500, plateau_patience=50)
    trainer = Trainer(model, "pseudo_depth", cfg, "l2")
    trainer.fit(targets)
    assert trainer.evaluate(targets)["val_rmse"] < 0.05


def _pretrained_val_rmse(kind, network, train_samples, val_samples, seed, out_dir):
    out_channels = 3 if kind == "denoising" else 1
    pretrained = build_depth_net(network.model_copy(update={"out_channels": out_channels}), seed=seed)
    budget = dict(epochs=200, max_steps=150, early_stop_patience=200, plateau_patience=200, seed=seed, batch_size=4)
    task = PretrainTask(kind=kind, noise_sigma=0.1 if kind == "denoising" else None)
    result = pretrain(pretrained, task, train_samples, _cfg(**budget), out_dir=out_dir / f"{kind}_{seed}")

    model = build_depth_net(network, seed=seed)
    warm_start(model, result.checkpoint)
    trainer = Trainer(model, "depth", _cfg(**dict(budget, max_steps=30)), "l2")
    trainer.fit(train_samples)
    return trainer.evaluate(val_samples)["val_rmse"]


@pytest.mark.slow
def test_pseudo_depth_pretraining_beats_denoising(tmp_path, tiny_network):
    cases = make_synthetic_corpus(16, resolution=32, seed=11)
    samples = [case.depth_sample() for case in cases]
    stats = canonical_stats_from_image(samples[0].image)
    samples = [normalize_sample(s, stats) for s in samples]
    train_samples, val_samples = samples[:12], samples[12:]

    wins = 0
    for seed in range(5):
        pd_rmse = _pretrained_val_rmse("pseudo_depth", tiny_network, train_samples, val_samples, seed, tmp_path)
        da_rmse = _pretrained_val_rmse("denoising", tiny_network, train_samples, val_samples, seed, tmp_path)
        wins += int(pd_rmse <= da_rmse)
    assert wins >= 3
    assert np.isfinite(pd_rmse) and np.isfinite(da_rmse)


def _cold_val_rmse(network, train_samples, val_samples, seed):
    budget = dict(epochs=200, max_steps=30, early_stop_patience=200, plateau_patience=200, seed=seed, batch_size=4)
    trainer = Trainer(build_depth_net(network, seed=seed), "depth", _cfg(**budget), "l2")
    trainer.fit(train_samples)
    return trainer.evaluate(val_samples)["val_rmse"]


@pytest.mark.slow
def test_warm_start_beats_random_initialization(tmp_path, tiny_network):
    cases = make_synthetic_corpus(16, resolution=32, seed=12)
    samples = [case.depth_sample() for case in cases]
    stats = canonical_stats_from_image(samples[0].image)
    samples = [normalize_sample(s, stats) for s in samples]
    train_samples, val_samples = samples[:12], samples[12:]

    wins = 0
    for seed in range(5):
        warm = _pretrained_val_rmse("pseudo_depth", tiny_network, train_samples, val_samples, seed, tmp_path)
        cold = _cold_val_rmse(tiny_network, train_samples, val_samples, seed)
        wins += int(warm < cold)
    assert wins >= 3
