import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixseg.geometry import (
    AugmentationError,
    AugmentConfig,
    Photometric,
    ViewTransform,
    apply_to_image,
    correspondence,
    identity_transform,
    sample_transform,
    source_to_view,
    view_to_source,
    warp_dense_map,
)

NO_PHOTO = dict(jitter_prob=0.0, blur_prob=0.0)


def test_degenerate_ranges_give_identity():
    cfg = AugmentConfig(scale=(1.0, 1.0), flip_prob=0.0, **NO_PHOTO)
    t = sample_transform(0, cfg, (40, 30))
    assert t.crop_rect == (0, 0, 40, 30)
    assert t.flip_h is False


def test_same_seed_same_transform():
    cfg = AugmentConfig()
    assert sample_transform(11, cfg, (64, 48)) == sample_transform(11, cfg, (64, 48))


def test_half_scale_crop_area():
    t = sample_transform(1, AugmentConfig(scale=(0.5, 0.5)), (100, 100))
    _, _, h, w = t.crop_rect
    # each side is rounded to the nearest pixel, so the exact area 5000 lies
    # between the areas of the crop shrunk and grown by half a pixel per side
    assert (h - 0.5) * (w - 0.5) <= 5000 <= (h + 0.5) * (w + 0.5)


@given(st.integers(0, 10_000), st.integers(8, 80), st.integers(8, 80))
@settings(max_examples=100, deadline=None)
def test_crop_always_inside_image(seed, h0, w0):
    t = sample_transform(seed, AugmentConfig(), (h0, w0))
    top, left, h, w = t.crop_rect
    assert 0 <= top and 0 <= left and h >= 1 and w >= 1
    assert top + h <= h0 and left + w <= w0


def test_identity_view_is_unchanged():
    rng = np.random.default_rng(0)
    img = rng.random((6, 5, 3))
    view, corr = apply_to_image(img, identity_transform((6, 5)))
    np.testing.assert_allclose(view, img)
    rr, cc = np.meshgrid(np.arange(6), np.arange(5), indexing="ij")
    np.testing.assert_allclose(corr.src_coords, np.stack([rr, cc], -1))


def test_flip_on_two_pixel_image():
    img = np.array([[[1.0, 0, 0], [0, 0, 1.0]]])
    t = ViewTransform((0, 0, 1, 2), True, (1, 2))
    view, corr = apply_to_image(img, t)
    np.testing.assert_allclose(view, img[:, ::-1])
    np.testing.assert_allclose(corr.src_coords[0, :, 1], [1.0, 0.0])


def test_crop_resize_source_coordinate():
    t = ViewTransform((10, 10, 50, 50), False, (25, 25))
    r, c = view_to_source(t, 0, 0)
    # each view pixel spans two source pixels: centre 0.5 maps to 11.0 - 0.5
    assert r == pytest.approx(10.5) and c == pytest.approx(10.5)


@given(st.integers(0, 5000))
@settings(max_examples=50, deadline=None)
def test_source_view_round_trip(seed):
    t = sample_transform(seed, AugmentConfig(out_size=(24, 20)), (50, 40))
    rows, cols = np.meshgrid(np.arange(24), np.arange(20), indexing="ij")
    r, c = view_to_source(t, rows, cols)
    back_r, back_c = source_to_view(t, r, c)
    np.testing.assert_allclose(back_r, rows, atol=1e-9)
    np.testing.assert_allclose(back_c, cols, atol=1e-9)


def test_warp_identity_and_flip():
    m = np.arange(12.0).reshape(3, 4)
    corr = correspondence(identity_transform((3, 4)), (3, 4))
    np.testing.assert_array_equal(warp_dense_map(m, corr, "bilinear"), m)
    pair = np.array([[3, 7]])
    flip = correspondence(ViewTransform((0, 0, 1, 2), True, (1, 2)), (1, 2))
    np.testing.assert_array_equal(warp_dense_map(pair, flip, "nearest"), [[7, 3]])


def test_upsampling_constant_map_stays_constant():
    m = np.full((4, 4, 3), 0.25)
    t = ViewTransform((0, 0, 4, 4), False, (8, 8))
    out = warp_dense_map(m, correspondence(t, (4, 4)), "bilinear")
    np.testing.assert_allclose(out, 0.25)


def test_nearest_keeps_labels_integral():
    labels = np.array([[0, 1], [2, 3]], dtype=np.int64)
    t = ViewTransform((0, 0, 2, 2), False, (5, 5))
    out = warp_dense_map(labels, correspondence(t, (2, 2)), "nearest")
    assert out.dtype == np.int64
    assert set(np.unique(out)) <= {0, 1, 2, 3}


def test_photometric_changes_view_only():
    rng = np.random.default_rng(1)
    img = rng.random((16, 16, 3))
    feats = rng.random((16, 16, 4))
    geo = ViewTransform((2, 3, 10, 12), True, (10, 12))
    jittered = ViewTransform(geo.crop_rect, geo.flip_h, geo.out_size, Photometric(1.3, 0.8, 1.2, 0.05, 0.7))
    v0, c0 = apply_to_image(img, geo)
    v1, c1 = apply_to_image(img, jittered)
    assert not np.allclose(v0, v1)
    np.testing.assert_array_equal(c0.src_coords, c1.src_coords)
    np.testing.assert_array_equal(warp_dense_map(feats, c0), warp_dense_map(feats, c1))


def test_bad_config_and_maps():
    with pytest.raises(AugmentationError):
        sample_transform(0, AugmentConfig(scale=(0.9, 0.2)), (10, 10))
    with pytest.raises(AugmentationError):
        sample_transform(0, AugmentConfig(), (0, 10))
    corr = correspondence(identity_transform((3, 3)), (3, 3))
    with pytest.raises(ValueError):
        warp_dense_map(np.zeros((2, 2)), corr)
    with pytest.raises(ValueError):
        warp_dense_map(np.zeros((3, 3)), corr, mode="cubic")
