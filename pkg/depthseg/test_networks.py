import numpy as np
import pytest
import torch
import torch.nn as nn
from pydantic import ValidationError

from depthseg.exceptions import ShapeMismatchError
from depthseg.model.networks import (
    build_depth_net,
    build_guided_seg_net,
    forward_depth,
    forward_seg,
    load_compatible_state,
)
from depthseg.schemas.config_schema import GuidedConfig, NetworkConfig
from depthseg.schemas.sample_schema import DepthMap, FundusImage


def test_filter_schedule_caps_at_512(full_depth_network):
    assert full_depth_network.filter_schedule() == [8, 16, 32, 64, 128, 256, 512, 512]
    assert NetworkConfig().filter_schedule() == [64, 128, 256, 512, 512, 512, 512, 512]


def test_depth_net_introspection(full_depth_network):
    model = build_depth_net(full_depth_network, seed=0)
    assert model.main_level_count == 8
    assert model.dropout_decoder_levels() == [0, 1, 2]
    assert isinstance(model.head_activation, nn.Tanh)
    assert model.output_activation == "tanh"
    assert not model.is_guided


def test_guided_net_introspection(full_depth_network):
    model = build_guided_seg_net(full_depth_network, GuidedConfig(guide="depth"), seed=0)
    assert model.main_level_count == 8
    assert model.guide_level_count == 6
    assert model.fusion_points == [2, 4, 6]
    assert isinstance(model.head_activation, nn.Softmax)
    assert model.cfg.out_channels == 3


def test_unguided_seg_net_has_no_guide_branch(tiny_network):
    model = build_guided_seg_net(tiny_network, GuidedConfig(guide="none", main_levels=5))
    assert not model.is_guided
    assert model.guide_level_count == 0
    assert list(model.guide_parameters()) == []


def test_guide_levels_default_to_two_fewer_than_main():
    assert GuidedConfig(main_levels=8).guide_levels == 6
    assert GuidedConfig(main_levels=5).fusion_levels == (2,)


def test_guided_config_validation():
    with pytest.raises(ValidationError):
        GuidedConfig(main_levels=6, guide_levels=6)
    with pytest.raises(ValidationError):
        GuidedConfig(main_levels=8, guide_levels=6, fusion_levels=(1, 3, 5))


def test_network_config_validation():
    with pytest.raises(ValidationError):
        NetworkConfig(input_resolution=100, encoder_levels=8)
    with pytest.raises(ValidationError):
        NetworkConfig(max_filters=256)
    with pytest.raises(ValidationError):
        NetworkConfig(dilation_rates=(4, 2))


def test_forward_shapes(tiny_network, tiny_guided):
    x = torch.randn(2, 3, 32, 32)
    depth_net = build_depth_net(tiny_network, seed=0)
    assert depth_net(x).shape == (2, 1, 32, 32)

    seg_net = build_guided_seg_net(tiny_network, tiny_guided, seed=0)
    out = seg_net(x, torch.rand(2, 1, 32, 32))
    assert out.shape == (2, 3, 32, 32)
    probs = seg_net.activate(out)
    torch.testing.assert_close(probs.sum(dim=1), torch.ones(2, 32, 32))


def test_forward_rejects_bad_inputs(tiny_network, tiny_guided):
    depth_net = build_depth_net(tiny_network)
    with pytest.raises(ShapeMismatchError):
        depth_net(torch.randn(1, 3, 24, 24))
    with pytest.raises(ShapeMismatchError):
        depth_net(torch.randn(1, 1, 32, 32))

    seg_net = build_guided_seg_net(tiny_network, tiny_guided)
    with pytest.raises(ValueError):
        seg_net(torch.randn(1, 3, 32, 32))
    with pytest.raises(ShapeMismatchError):
        seg_net(torch.randn(1, 3, 32, 32), torch.randn(1, 1, 16, 16))


def test_guide_changes_segmentation_output(tiny_network, tiny_guided):
    model = build_guided_seg_net(tiny_network, tiny_guided, seed=0).eval()
    x = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        a = model(x, torch.zeros(1, 1, 32, 32))
        b = model(x, torch.rand(1, 1, 32, 32))
    assert not torch.allclose(a, b)


def test_same_seed_builds_identical_weights(tiny_network):
    a = build_depth_net(tiny_network, seed=3).state_dict()
    b = build_depth_net(tiny_network, seed=3).state_dict()
    for key in a:
        torch.testing.assert_close(a[key], b[key])


def test_forward_depth_returns_unit_range_map(tiny_network, small_depth_samples):
    model = build_depth_net(tiny_network, seed=0)
    depth = forward_depth(model, small_depth_samples[0].image)
    assert isinstance(depth, DepthMap)
    assert depth.shape == (32, 32)
    assert 0.0 <= depth.values.min() and depth.values.max() <= 1.0


def test_forward_depth_requires_normalized_image_and_resolution(tiny_network):
    model = build_depth_net(tiny_network)
    raw = FundusImage(np.full((32, 32, 3), 0.5))
    with pytest.raises(ValueError, match="normalized"):
        forward_depth(model, raw)
    wrong = FundusImage(np.zeros((64, 64, 3)), normalized=True)
    with pytest.raises(ValueError, match="expects 32"):
        forward_depth(model, wrong)


def test_forward_seg_probabilities_sum_to_one(tiny_network, tiny_guided, small_seg_samples):
    model = build_guided_seg_net(tiny_network, tiny_guided, seed=0)
    sample = small_seg_samples[0]
    prob = forward_seg(model, sample.image, sample.guide)
    assert prob.probs.shape == (32, 32, 3)
    np.testing.assert_allclose(prob.probs.sum(axis=2), 1.0, atol=1e-12)
    with pytest.raises(ValueError, match="guide"):
        forward_seg(model, sample.image, None)


def test_load_compatible_state_skips_mismatched_head(tiny_network):
    source = build_depth_net(tiny_network.model_copy(update={"out_channels": 3}), seed=1)
    target = build_depth_net(tiny_network, seed=2)
    loaded, skipped = load_compatible_state(target, source.state_dict())
    assert "head.weight" in skipped and "head.bias" in skipped
    assert "encoder.0.down.conv.weight" in loaded
    torch.testing.assert_close(target.state_dict()["encoder.0.down.conv.weight"], source.state_dict()["encoder.0.down.conv.weight"])


def test_innermost_level_keeps_its_block_without_batch_norm(tiny_network):
    model = build_depth_net(tiny_network, seed=0)
    innermost = model.encoder[-1]
    assert type(innermost.block).__name__ == "DRIBlock"
    assert not any(isinstance(m, nn.BatchNorm2d) for m in innermost.modules())
    assert any(isinstance(m, nn.BatchNorm2d) for m in model.encoder[-2].block.modules())
    # a single 1×1 bottleneck sample still trains
    model.train()
    out = model(torch.randn(1, 3, 32, 32))
    assert out.shape == (1, 1, 32, 32)
