import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nestkd.augment import (
    HED_FROM_RGB,
    RGB_FROM_HED,
    VIEW_SIZE,
    CropSpec,
    VisualAugConfig,
    apply_spatial,
    apply_visual,
    gaussian_blur,
    make_training_views,
    perturb_stains,
    sample_crop,
)
from nestkd.errors import InvalidCrop, InvalidSize
from nestkd.kernels import BACKEND


class _EdgeRng:
    """Forces area=1.0 and aspect=1.0 (upper/neutral draws) and no flips."""

    def uniform(self, lo, hi):
        return 1.0

    def integers(self, lo, hi):
        return lo

    def random(self):
        return 0.99


def _tile(rng, size=448):
    return rng.integers(0, 256, (size, size, 3), dtype=np.uint8)


def test_crop_area_and_aspect_bounds(rng):
    for _ in range(2000):
        c = sample_crop((448, 448), rng)
        c.check(448, 448)
        assert 0.25 <= c.area_fraction(448, 448) <= 1.0
        if (c.w, c.h) != (448, 448):
            assert 0.88 <= c.w / c.h <= 1.12  # integer rounding on top of [0.9, 1.1]


def test_crop_forced_full_tile():
    assert sample_crop((448, 448), _EdgeRng()) == CropSpec(0, 0, 448, 448, False, False)


def test_crop_area_mean_monte_carlo():
    rng = np.random.default_rng(0)
    fr = [sample_crop((448, 448), rng).area_fraction(448, 448) for _ in range(10_000)]
    assert 0.60 <= np.mean(fr) <= 0.65


def test_crop_rejects_small_source(rng):
    with pytest.raises(InvalidSize):
        sample_crop((200, 448), rng)


def test_crop_flip_rate(rng):
    crops = [sample_crop((300, 300), rng) for _ in range(4000)]
    assert abs(np.mean([c.hflip for c in crops]) - 0.5) < 0.04
    assert abs(np.mean([c.vflip for c in crops]) - 0.5) < 0.04


def test_apply_spatial_identity(rng):
    tile = _tile(rng, 224)
    out = apply_spatial(tile, CropSpec(0, 0, 224, 224, False, False))
    np.testing.assert_array_equal(out, tile)


def test_apply_spatial_flip_involution(rng):
    tile = _tile(rng, 224)
    h = apply_spatial(tile, CropSpec(0, 0, 224, 224, True, False))
    np.testing.assert_array_equal(h, tile[:, ::-1])
    np.testing.assert_array_equal(h[:, ::-1], tile)
    v = apply_spatial(tile, CropSpec(0, 0, 224, 224, False, True))
    np.testing.assert_array_equal(v, tile[::-1])


def test_resize_preserves_checkerboard_mean():
    board = ((np.indices((448, 448)).sum(axis=0) // 8) % 2 * 255).astype(np.uint8)
    tile = np.repeat(board[..., None], 3, axis=2)
    out = apply_spatial(tile, CropSpec(0, 0, 448, 448, False, False))
    assert out.shape == (VIEW_SIZE, VIEW_SIZE, 3)
    assert abs(out.mean() - tile.mean()) <= 1.0


def test_apply_spatial_invalid_crop(rng):
    with pytest.raises(InvalidCrop):
        apply_spatial(_tile(rng, 224), CropSpec(10, 0, 224, 224, False, False))


def test_stain_matrices_are_inverse():
    np.testing.assert_allclose(HED_FROM_RGB @ RGB_FROM_HED, np.eye(3), atol=1e-12)


def test_zero_config_is_identity(rng):
    img = _tile(rng, 224)
    out = apply_visual(img, VisualAugConfig.disabled(), rng)
    np.testing.assert_array_equal(out, img)
    assert out is not img


@given(st.lists(st.floats(0.0, 0.5), min_size=3, max_size=3), st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3))
@settings(max_examples=50, deadline=None)
def test_white_is_fixed_point(scale_delta, shift):
    white = np.full((8, 8, 3), 255, np.uint8)
    out = perturb_stains(white, 1.0 + np.array(scale_delta), shift)
    assert out.min() >= 253


def test_identity_perturbation_roundtrip(rng):
    img = _tile(rng, 64)
    out = perturb_stains(img, [1, 1, 1], [0, 0, 0])
    # optical density of 0 maps to 1/255, so the roundtrip is exact except at 0
    np.testing.assert_array_equal(out[img > 0], img[img > 0])


def test_stain_perturbation_oracle(rng):
    img = _tile(rng, 16)
    scale, shift = np.array([1.04, 0.97, 1.02]), np.array([0.01, -0.015, 0.005])
    od = -np.log10(np.maximum(img.astype(np.float64), 1) / 255.0)
    conc = od @ HED_FROM_RGB
    w = np.clip(od.sum(-1, keepdims=True) / 0.15, 0, 1)
    ref = np.clip(np.rint(255 * 10 ** -((conc * scale + w * shift) @ RGB_FROM_HED)), 0, 255)
    assert np.abs(perturb_stains(img, scale, shift).astype(int) - ref).max() <= 1


@pytest.mark.skipif(BACKEND != "compiled", reason="extension not built")
def test_stain_backends_agree(rng):
    img = _tile(rng, 224)
    a = perturb_stains(img, [1.03, 0.96, 1.0], [0.01, 0.0, -0.02], backend="compiled")
    b = perturb_stains(img, [1.03, 0.96, 1.0], [0.01, 0.0, -0.02], backend="python")
    assert np.abs(a.astype(int) - b).max() <= 1
    assert np.mean(a == b) > 0.999


def test_blur_reduces_variance(rng):
    img = _tile(rng, 64)
    assert gaussian_blur(img, 2.0).astype(float).var() < img.astype(float).var()


def test_visual_config_validation():
    with pytest.raises(ValueError):
        VisualAugConfig(blur_probability=1.5)
    with pytest.raises(ValueError):
        VisualAugConfig(blur_sigma=(2.0, 1.0))
    with pytest.raises(ValueError):
        VisualAugConfig(hed_shift=float("inf"))
    assert VisualAugConfig(hed_scale=0.1).hed_scale == (0.1, 0.1, 0.1)


def test_training_views_counts_and_shapes(rng):
    vs = make_training_views(_tile(rng), 3, VisualAugConfig(), rng)
    assert len(vs.aligned) == len(vs.nonaligned) == 4
    assert len(vs.nonaligned_crops) == 4 and vs.model_ids[0] == "student"
    for v in vs.aligned + vs.nonaligned:
        assert v.shape == (224, 224, 3) and v.dtype == np.uint8


def test_aligned_views_identical_without_visual_aug(rng):
    vs = make_training_views(_tile(rng), 3, VisualAugConfig.disabled(), rng)
    for v in vs.aligned[1:]:
        np.testing.assert_array_equal(v, vs.aligned[0])


def test_views_deterministic(rng):
    tile = _tile(rng)
    a = make_training_views(tile, 2, VisualAugConfig(), np.random.default_rng(9))
    b = make_training_views(tile, 2, VisualAugConfig(), np.random.default_rng(9))
    for x, y in zip(a.aligned + a.nonaligned, b.aligned + b.nonaligned):
        np.testing.assert_array_equal(x, y)
    assert a.aligned_crop == b.aligned_crop and a.nonaligned_crops == b.nonaligned_crops


def test_nonaligned_crops_independent():
    rng = np.random.default_rng(0)
    tile = np.zeros((256, 256, 3), np.uint8)
    areas = np.array([[c.area_fraction(256, 256) for c in
                       make_training_views(tile, 2, VisualAugConfig.disabled(), r).nonaligned_crops]
                      for r in rng.spawn(1000)])
    corr = np.corrcoef(areas.T)
    assert np.all(np.abs(corr[np.triu_indices(3, 1)]) < 0.1)


def test_views_without_nonaligned(rng):
    vs = make_training_views(_tile(rng), 2, VisualAugConfig(), rng, include_nonaligned=False)
    assert vs.nonaligned is None and len(vs.aligned) == 3
