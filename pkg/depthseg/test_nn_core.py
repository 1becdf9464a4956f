import pytest
import torch
from pydantic import ValidationError

from depthseg.exceptions import ShapeMismatchError
from depthseg.model.nn_core import (
    BlockConfig,
    ConvBnAct,
    DRIBlock,
    MFFBlock,
    ResidualBlock,
    block_from_config,
    conv_bn_act,
    dri_block,
    inception_parameter_count,
    make_block,
    mff_block,
    parameter_count,
    residual_block,
)


def _double_eval(module):
    return module.double().eval()


def test_stride_two_conv_halves_and_deconv_doubles():
    x = torch.randn(2, 3, 16, 16)
    down = ConvBnAct(3, 8, 4, stride=2)
    up = ConvBnAct(8, 4, 4, stride=2, activation="relu", transposed=True)
    h = down(x)
    assert h.shape == (2, 8, 8, 8)
    assert up(h).shape == (2, 4, 16, 16)


@pytest.mark.parametrize("block", [ResidualBlock(8), DRIBlock(8, (1, 2, 4)), DRIBlock(8, (1, 3))])
def test_blocks_preserve_shape(block):
    x = torch.randn(2, 8, 16, 16)
    assert block(x).shape == x.shape


def test_blocks_reject_wrong_channel_count():
    with pytest.raises(ShapeMismatchError):
        ResidualBlock(8)(torch.randn(1, 4, 8, 8))
    with pytest.raises(ShapeMismatchError):
        DRIBlock(8)(torch.randn(1, 4, 8, 8))
    with pytest.raises(ShapeMismatchError):
        ConvBnAct(3, 8)(torch.randn(1, 1, 8, 8))


def test_dri_block_needs_dilation_rates():
    with pytest.raises(ValueError):
        DRIBlock(8, ())


def test_block_config_validation():
    assert BlockConfig(kind="conv", in_channels=3, out_channels=8).out_channels == 8
    with pytest.raises(ValidationError):
        BlockConfig(kind="residual", in_channels=4, out_channels=8)
    with pytest.raises(ValidationError):
        BlockConfig(kind="dri", in_channels=8, out_channels=8, dilation_rates=(2, 1))
    with pytest.raises(ValidationError):
        BlockConfig(kind="inception", in_channels=8, out_channels=8)


def test_block_from_config_builds_matching_module():
    assert isinstance(block_from_config(BlockConfig(kind="dri", in_channels=8, out_channels=8)), DRIBlock)
    assert isinstance(block_from_config(BlockConfig(kind="residual", in_channels=8, out_channels=8)), ResidualBlock)
    with pytest.raises(ValueError):
        make_block("inception", 8)


def test_functional_wrappers():
    x = torch.randn(1, 8, 8, 8)
    assert residual_block(x).shape == x.shape
    assert dri_block(x, (1, 2)).shape == x.shape
    y = conv_bn_act(x, BlockConfig(kind="conv", in_channels=8, out_channels=16), stride=2)
    assert y.shape == (1, 16, 4, 4)
    with pytest.raises(ShapeMismatchError):
        conv_bn_act(x, BlockConfig(kind="conv", in_channels=4, out_channels=16))


def test_mff_fuses_equal_shapes_with_relu_output():
    block = MFFBlock(8, "dri")
    img, guide = torch.randn(2, 8, 8, 8), torch.randn(2, 8, 8, 8)
    out = block(img, guide)
    assert out.shape == img.shape
    assert out.min() >= 0
    assert mff_block(img, guide, "residual").shape == img.shape


def test_mff_rejects_mismatched_inputs():
    with pytest.raises(ShapeMismatchError):
        MFFBlock(8)(torch.randn(1, 8, 8, 8), torch.randn(1, 8, 4, 4))


def test_mff_guide_branch_receives_gradient():
    block = MFFBlock(4, "residual")
    img = torch.randn(1, 4, 8, 8)
    guide = torch.randn(1, 4, 8, 8, requires_grad=True)
    block(img, guide).sum().backward()
    assert guide.grad is not None and guide.grad.abs().sum() > 0


def test_dri_uses_fewer_parameters_than_equal_width_inception():
    assert parameter_count(DRIBlock(64, (1, 2, 4))) < inception_parameter_count(64)


@pytest.mark.parametrize(
    "module",
    [
        ConvBnAct(2, 3, 3),
        ConvBnAct(2, 3, 4, stride=2),
        ConvBnAct(2, 3, 4, stride=2, activation="relu", transposed=True),
        ResidualBlock(2),
        DRIBlock(4, (1, 2)),
    ],
)
def test_block_gradients_match_finite_differences(module):
    module = _double_eval(module)
    x = torch.randn(1, module.in_channels if hasattr(module, "in_channels") else module.channels, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(module, (x,), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_mff_gradients_match_finite_differences():
    module = _double_eval(MFFBlock(2, "residual"))
    img = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    guide = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(module, (img, guide), eps=1e-6, atol=1e-6, rtol=1e-4)


def _zeroed(module):
    with torch.no_grad():
        for parameter in module.parameters():
            parameter.zero_()
    return module.eval()


@pytest.mark.parametrize("block", [ResidualBlock(8), DRIBlock(8, (1, 2, 4))])
def test_zero_weight_blocks_are_the_identity(block):
    x = torch.randn(2, 8, 12, 12)
    torch.testing.assert_close(_zeroed(block)(x), x, rtol=0, atol=0)


def test_dri_impulse_reaches_only_its_dilated_taps():
    block = _double_eval(DRIBlock(8, (1, 2, 4)))
    zeros = torch.zeros(1, 8, 17, 17, dtype=torch.float64)
    impulse = zeros.clone()
    impulse[:, :, 8, 8] = 1.0
    with torch.no_grad():
        diff = (block(impulse) - impulse - block(zeros)).abs().amax(dim=(0, 1))
    rows, cols = torch.nonzero(diff > 1e-12, as_tuple=True)
    assert rows.numel() > 0
    assert int((rows - 8).abs().max()) <= 4 and int((cols - 8).abs().max()) <= 4
    assert diff[5].max() < 1e-12 and diff[11].max() < 1e-12
    assert diff[4, 8] > 0 and diff[12, 8] > 0


def test_mff_with_silent_guide_reduces_to_image_branch():
    block = MFFBlock(4, "residual").eval()
    _zeroed(block.guide_branch)
    img = torch.randn(1, 4, 8, 8)
    with torch.no_grad():
        expected = block.fuse(block.image_branch(img))
        torch.testing.assert_close(block(img, torch.zeros_like(img)), expected)
