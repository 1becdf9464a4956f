import numpy as np
import pytest

from depthseg.data.pipeline import canonical_stats_from_image, normalize_to_canonical
from depthseg.evaluation.metrics import pearson_corr
from depthseg.preprocessing.pseudo_depth import (
    inpaint,
    make_pseudo_depth,
    pseudo_depth_guide,
    pseudo_depth_sample,
    segment_vessels,
    vessel_radius,
)
from depthseg.schemas.sample_schema import FundusImage, PseudoDepthMap


def _normalized(image):
    return normalize_to_canonical(image, canonical_stats_from_image(image))


def test_pseudo_depth_recovers_synthetic_depth(corpus):
    correlations = []
    for case in corpus:
        pseudo = make_pseudo_depth(_normalized(case.image))
        correlations.append(pearson_corr(pseudo.values, case.depth.values))
    assert min(correlations) > 0.95


def test_pseudo_depth_range_and_type(corpus):
    pseudo = make_pseudo_depth(_normalized(corpus[0].image))
    assert isinstance(pseudo, PseudoDepthMap)
    assert pseudo.values.min() >= 0.0 and pseudo.values.max() <= 1.0
    assert pseudo.vessel_mask.shape == pseudo.values.shape


def test_vessel_mask_finds_drawn_vessels(corpus):
    case = corpus[5]
    mask = segment_vessels(_normalized(case.image))
    hits = np.logical_and(mask, case.vessel_mask).sum()
    assert hits > 0.5 * case.vessel_mask.sum()


def test_raw_image_is_rejected(corpus):
    with pytest.raises(ValueError, match="normalized"):
        make_pseudo_depth(corpus[0].image)


def test_constant_green_channel_is_rejected():
    pixels = np.random.default_rng(0).uniform(0.2, 0.8, size=(32, 32, 3))
    pixels[..., 1] = 0.4
    image = FundusImage(pixels, normalized=True)
    with pytest.raises(ValueError, match="Green channel"):
        make_pseudo_depth(image)


def test_empty_mask_leaves_pseudo_depth_as_inverted_green(corpus):
    image = _normalized(corpus[0].image)
    pseudo = make_pseudo_depth(image, vessel_mask=np.zeros((64, 64), dtype=bool))
    green = image.pixels[..., 1]
    expected = 1.0 - (green - green.min()) / (green.max() - green.min())
    np.testing.assert_allclose(pseudo.values, expected, atol=1e-12)


def test_inpaint_keeps_unmasked_pixels_and_fills_smoothly():
    yy = np.mgrid[0:32, 0:32][0].astype(np.float64)
    channel = yy / 31.0
    corrupted = channel.copy()
    mask = np.zeros_like(channel, dtype=bool)
    mask[10:13, :] = True
    corrupted[mask] = 0.0
    filled = inpaint(corrupted, mask, tol=1e-8, max_iter=5000)
    np.testing.assert_array_equal(filled[~mask], channel[~mask])
    np.testing.assert_allclose(filled[mask], channel[mask], atol=1e-3)


def test_inpaint_rejects_fully_masked_channel():
    with pytest.raises(ValueError):
        inpaint(np.zeros((4, 4)), np.ones((4, 4), dtype=bool))


def test_vessel_radius_scales_with_resolution():
    assert vessel_radius(256, 256) == 7
    assert vessel_radius(512, 512) == 14
    assert vessel_radius(32, 32) == 2


def test_sample_helpers_set_target_and_guide(corpus):
    seg = corpus[0].seg_sample()
    seg.image = _normalized(seg.image)
    as_target = pseudo_depth_sample(seg)
    as_guide = pseudo_depth_guide(seg)
    np.testing.assert_array_equal(as_target.target.values, as_guide.guide.values)
    assert as_guide.target is seg.target


def test_red_and_blue_channels_do_not_matter(corpus):
    image = _normalized(corpus[3].image)
    pixels = image.pixels.copy()
    rng = np.random.default_rng(4)
    pixels[..., 0] = rng.normal(size=pixels.shape[:2])
    pixels[..., 2] = rng.normal(size=pixels.shape[:2])
    original = make_pseudo_depth(image)
    shuffled = make_pseudo_depth(image.with_pixels(pixels))
    np.testing.assert_array_equal(shuffled.values, original.values)
    np.testing.assert_array_equal(shuffled.vessel_mask, original.vessel_mask)


def test_pseudo_depth_decreases_with_green(corpus):
    image = _normalized(corpus[1].image)
    pseudo = make_pseudo_depth(image, vessel_mask=np.zeros((64, 64), dtype=bool))
    order = np.argsort(image.pixels[..., 1].ravel(), kind="stable")
    assert np.all(np.diff(pseudo.values.ravel()[order]) <= 1e-12)


def _lines_image(background, line):
    pixels = np.full((64, 64, 3), 0.5)
    pixels[..., 1] = background
    pixels[[10, 30, 50], :, 1] = line
    return FundusImage(pixels, normalized=True)


def test_constant_image_has_no_vessels():
    assert not segment_vessels(FundusImage(np.full((32, 32, 3), 0.5), normalized=True)).any()


def test_dark_lines_are_vessels_and_bright_lines_are_not():
    lines = np.zeros((64, 64), dtype=bool)
    lines[[10, 30, 50], :] = True
    dark = segment_vessels(_lines_image(0.6, 0.3))
    assert dark[lines].mean() >= 0.9
    bright = segment_vessels(_lines_image(0.3, 0.6))
    assert bright.sum() <= 0.01 * bright.size


def test_single_masked_pixel_takes_its_neighbours_mean():
    yy, xx = np.mgrid[0:16, 0:16].astype(np.float64)
    channel = 0.03 * yy + 0.01 * xx**2
    mask = np.zeros_like(channel, dtype=bool)
    mask[7, 9] = True
    filled = inpaint(channel, mask)
    expected = (channel[6, 9] + channel[8, 9] + channel[7, 8] + channel[7, 10]) / 4
    assert filled[7, 9] == pytest.approx(expected, abs=1e-12)


def test_inpaint_defaults_fill_a_ramp():
    channel = np.mgrid[0:32, 0:32][0].astype(np.float64) / 31.0
    mask = np.zeros_like(channel, dtype=bool)
    mask[10:13, :] = True
    corrupted = np.where(mask, 0.0, channel)
    np.testing.assert_allclose(inpaint(corrupted, mask)[mask], channel[mask], atol=2e-3)
