import math

import pytest
import torch

from depthseg.exceptions import ShapeMismatchError
from depthseg.training.losses import (
    berhu,
    berhu_threshold,
    loss_berhu,
    loss_l1,
    loss_l2,
    loss_multiclass_ce,
    regression_loss,
)


def t(values):
    return torch.tensor(values, dtype=torch.float64)


def _residual_case(fn, residual, expected):
    residual = t(residual)
    value = fn(residual, torch.zeros_like(residual))
    assert math.isclose(float(value), expected, rel_tol=1e-9, abs_tol=1e-12)


@pytest.mark.parametrize(
    "residual, expected",
    [
        ([3.0, 4.0], 5.0),
        ([0.0, 0.0, 0.0], 0.0),
        ([1.0, 1.0, 1.0, 1.0], 2.0),
        ([[1.0, 2.0], [2.0, 4.0]], 5.0),
        ([-6.0, 8.0], 10.0),
        ([1e-3], 1e-3),
    ],
)
def test_l2_closed_form(residual, expected):
    _residual_case(loss_l2, residual, expected)


@pytest.mark.parametrize(
    "residual, expected",
    [
        ([3.0, -4.0], 7.0),
        ([0.5, 0.5, -1.0], 2.0),
        ([0.0, 0.0], 0.0),
        ([2.0] * 5, 10.0),
        ([[-1.5, 0.25], [0.25, 1.0]], 3.0),
    ],
)
def test_l1_closed_form(residual, expected):
    _residual_case(loss_l1, residual, expected)


@pytest.mark.parametrize(
    "residual, expected",
    [
        ([1.0, 5.0], 1.0 + 13.0),
        ([10.0], 26.0),
        ([0.1, 0.2, 1.0], 0.1 + 0.2 + 2.6),
        ([0.0, 0.0], 0.0),
        ([-2.0, 2.0], 10.4),
        ([[0.5, -0.5], [2.5, 0.0]], 0.5 + 0.5 + (6.25 + 0.25) / 1.0),
    ],
)
def test_berhu_closed_form(residual, expected):
    _residual_case(loss_berhu, residual, expected)


def test_berhu_threshold_is_fifth_of_batch_max():
    residual = t([[0.3, -2.5], [1.0, 0.0]])
    assert float(berhu_threshold(residual)) == 0.2 * 2.5


def test_berhu_continuous_at_threshold():
    c = 0.7
    below = berhu(t([c]), c)
    at_above = berhu(t([c * (1 + 1e-12)]), c)
    assert math.isclose(float(below), c, abs_tol=1e-9)
    assert math.isclose(float(at_above), c, abs_tol=1e-9)


def test_berhu_is_l1_below_threshold_and_quadratic_above():
    values = berhu(t([-0.2, 0.2, 3.0]), 1.0)
    torch.testing.assert_close(values, t([0.2, 0.2, 5.0]))


def test_regression_losses_reject_shape_mismatch():
    for fn in (loss_l2, loss_l1, loss_berhu):
        with pytest.raises(ShapeMismatchError):
            fn(t([1.0, 2.0]), t([1.0]))


def test_regression_loss_lookup():
    assert regression_loss("berhu") is loss_berhu
    with pytest.raises(ValueError):
        regression_loss("huber")


def _prob(*pixels):
    """N=1, C×1×P probabilities from per-pixel class vectors."""
    return t(pixels).T.reshape(1, len(pixels[0]), 1, len(pixels))


@pytest.mark.parametrize(
    "pixels, labels, reduction, expected",
    [
        (([1.0, 0.0, 0.0],), [0], "mean", 0.0),
        (([1 / 3, 1 / 3, 1 / 3],), [2], "mean", math.log(3)),
        (([0.5, 0.25, 0.25],), [0], "mean", math.log(2)),
        (([0.5, 0.25, 0.25],), [1], "mean", math.log(4)),
        (([0.5, 0.25, 0.25], [0.5, 0.25, 0.25]), [0, 1], "mean", 1.5 * math.log(2)),
        (([0.5, 0.25, 0.25], [0.5, 0.25, 0.25]), [0, 1], "sum", 3.0 * math.log(2)),
        (([0.1, 0.1, 0.8], [0.2, 0.7, 0.1]), [2, 1], "mean", -(math.log(0.8) + math.log(0.7)) / 2),
    ],
)
def test_cross_entropy_closed_form(pixels, labels, reduction, expected):
    prob = _prob(*pixels)
    labels = torch.tensor(labels).reshape(1, 1, len(labels))
    value = loss_multiclass_ce(prob, labels, reduction=reduction)
    assert math.isclose(float(value), expected, rel_tol=1e-9, abs_tol=1e-12)


def test_cross_entropy_from_logits_matches_probabilities():
    logits = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    labels = torch.randint(0, 3, (2, 4, 4))
    direct = loss_multiclass_ce(torch.softmax(logits, dim=1), labels)
    fused = loss_multiclass_ce(logits, labels, from_logits=True)
    assert math.isclose(float(direct), float(fused), rel_tol=1e-9)
    zero = loss_multiclass_ce(torch.zeros(1, 3, 2, 2, dtype=torch.float64), torch.zeros(1, 2, 2, dtype=torch.long), from_logits=True)
    assert math.isclose(float(zero), math.log(3), rel_tol=1e-12)


def test_cross_entropy_validates_inputs():
    prob = torch.full((1, 3, 2, 2), 1 / 3, dtype=torch.float64)
    with pytest.raises(ValueError):
        loss_multiclass_ce(prob, torch.full((1, 2, 2), 3))
    with pytest.raises(ShapeMismatchError):
        loss_multiclass_ce(prob, torch.zeros(1, 3, 3, dtype=torch.long))
    with pytest.raises(ValueError):
        loss_multiclass_ce(prob, torch.zeros(1, 2, 2, dtype=torch.long), reduction="max")


def test_loss_gradients_match_finite_differences():
    gt = torch.rand(4, 4, dtype=torch.float64)
    pred = (gt + 0.5 + torch.rand(4, 4, dtype=torch.float64)).requires_grad_()
    assert torch.autograd.gradcheck(lambda p: loss_l2(p, gt), (pred,), eps=1e-6, atol=1e-6, rtol=1e-4)
    assert torch.autograd.gradcheck(lambda p: loss_l1(p, gt), (pred,), eps=1e-6, atol=1e-6, rtol=1e-4)

    # c held fixed: the batch threshold is detached from the graph
    residual = (torch.rand(4, 4, dtype=torch.float64) * 2 - 1).requires_grad_()
    c = 0.37
    with torch.no_grad():
        residual.add_(torch.sign(residual) * 0.05 * ((residual.abs() - c).abs() < 0.05))
    assert torch.autograd.gradcheck(lambda r: berhu(r, c).sum(), (residual,), eps=1e-6, atol=1e-6, rtol=1e-4)

    logits = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    labels = torch.randint(0, 3, (1, 4, 4))
    assert torch.autograd.gradcheck(
        lambda z: loss_multiclass_ce(z, labels, from_logits=True), (logits,), eps=1e-6, atol=1e-6, rtol=1e-4
    )
    probs = torch.softmax(torch.randn(1, 3, 4, 4, dtype=torch.float64), dim=1).requires_grad_()
    assert torch.autograd.gradcheck(lambda p: loss_multiclass_ce(p, labels), (probs,), eps=1e-6, atol=1e-6, rtol=1e-4)
