import numpy as np
import pytest
from scipy import ndimage

from reperfq.core import Frame, SegClass, SegmentationMap
from reperfq.errors import EmptyInput, InvalidConfig
from reperfq.segmentation import (
    PALETTE,
    FrangiConfig,
    FrangiFilter,
    PerfusionSegmenter,
    decode_colormap,
    frangi_vesselness,
    hessian_at_scale,
    histogram_counts,
    otsu_threshold,
    render_colormap,
    segment_minip,
)

from .oracles import otsu_exhaustive

SIZE = 96


def _line_image(width=4, depth=200 / 255, size=SIZE, column=None):
    px = np.ones((size, size))
    c = size // 2 if column is None else column
    px[:, c - width // 2: c - width // 2 + width] -= depth
    return px


def _disk_image(radius=20, depth=200 / 255, size=SIZE):
    y, x = np.mgrid[0:size, 0:size]
    px = np.ones((size, size))
    px[(x - size / 2) ** 2 + (y - size / 2) ** 2 <= radius**2] -= depth
    return px


# --- Hessian ----------------------------------------------------------------

def test_constant_image_has_zero_eigenvalues():
    l1, l2 = hessian_at_scale(np.full((32, 32), 100.0), 2.0)
    assert np.max(np.abs(l1)) < 1e-9 and np.max(np.abs(l2)) < 1e-9


def test_dark_valley_eigenvalues():
    sigma = 3.0
    x = np.arange(SIZE) - SIZE / 2
    profile = 255 - 200 * np.exp(-x**2 / (2 * sigma**2))
    img = np.tile(profile, (SIZE, 1))
    l1, l2 = hessian_at_scale(img, sigma)
    c = SIZE // 2
    assert l2[c, c] > 0
    assert abs(l1[c, c]) < 1e-6 * abs(l2[c, c])


def test_hessian_rotates_with_image():
    rng = np.random.default_rng(0)
    img = ndimage.gaussian_filter(rng.random((64, 64)) * 255, 2.0)
    a1, a2 = hessian_at_scale(img, 2.0)
    b1, b2 = hessian_at_scale(np.rot90(img), 2.0)
    band = slice(12, -12)
    np.testing.assert_allclose(np.rot90(a1)[band, band], b1[band, band], atol=1e-6)
    np.testing.assert_allclose(np.rot90(a2)[band, band], b2[band, band], atol=1e-6)


# --- Frangi -----------------------------------------------------------------

def test_flat_image_has_zero_response():
    assert np.all(frangi_vesselness(np.full((48, 48), 0.7)) == 0)


def test_line_centre_passes_threshold():
    v = frangi_vesselness(_line_image())
    assert v[SIZE // 2, SIZE // 2] > 0.08


def test_disk_is_suppressed_relative_to_line():
    line = frangi_vesselness(_line_image())[SIZE // 2, SIZE // 2]
    disk = frangi_vesselness(_disk_image())[SIZE // 2, SIZE // 2]
    assert disk < line


def test_bright_line_gives_no_response():
    px = 1.0 - _line_image()
    assert frangi_vesselness(px)[SIZE // 2, SIZE // 2] == 0


def test_frangi_rotational_covariance():
    rng = np.random.default_rng(3)
    img = np.clip(ndimage.gaussian_filter(rng.random((80, 80)), 3.0) * 2 - 0.5, 0, 1)
    cfg = FrangiConfig(sigmas=(2.0, 3.0))
    a = frangi_vesselness(img, cfg)
    b = frangi_vesselness(np.rot90(img), cfg)
    band = slice(16, -16)
    np.testing.assert_allclose(np.rot90(a)[band, band], b[band, band], atol=1e-6)


def test_frangi_config_validation():
    with pytest.raises(InvalidConfig):
        FrangiConfig(sigmas=(4.0, 2.0))
    with pytest.raises(InvalidConfig):
        FrangiConfig(response_threshold=0.0)


def test_frangi_transformer():
    f = FrangiFilter(sigmas=(2.0,)).fit()
    assert np.array_equal(f.transform(_line_image()), frangi_vesselness(_line_image(), FrangiConfig((2.0,))))
    assert f.get_params()["sigmas"] == (2.0,)


# --- Otsu -------------------------------------------------------------------

def test_bimodal_split():
    values = np.r_[np.zeros(50), np.ones(50)]
    thr = otsu_threshold(values)
    assert 0 < thr < 1
    assert np.all(values[:50] < thr) and np.all(values[50:] >= thr)


def test_single_value():
    assert otsu_threshold(np.full(20, 0.37)) == 0.37


def test_empty_values():
    with pytest.raises(EmptyInput):
        otsu_threshold(np.array([]))


def test_otsu_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(50):
        values = np.clip(rng.normal(rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3), 1000), 0, 1)
        counts, edges = histogram_counts(values)
        k = otsu_exhaustive(counts.tolist())
        assert otsu_threshold(values) == edges[k]


# --- segmentation -----------------------------------------------------------

def test_bright_image_is_all_non_perfused():
    seg = segment_minip(Frame(np.ones((48, 48))))
    assert np.all(seg.classes == SegClass.NON_PERFUSED)


def test_line_is_vessel_and_rest_non_perfused():
    px = _line_image()
    seg = segment_minip(Frame(px)).classes
    assert np.all(seg[px < 1] == SegClass.VESSEL)
    assert not np.any(seg == SegClass.PERFUSED)


def _line_and_grey_region():
    px = _line_image(size=160, column=16)
    px[40:160, 40:160] = 0.6
    return px


def test_grey_region_is_perfused():
    px = _line_and_grey_region()
    seg = segment_minip(Frame(px)).classes
    assert np.all(seg[:, 14:18] == SegClass.VESSEL)
    assert np.all(seg[80:150, 80:150] == SegClass.PERFUSED)
    assert np.all(seg[:10, 60:] == SegClass.NON_PERFUSED)


def test_segmenter_estimator_matches_function():
    px = _line_and_grey_region()
    seg = PerfusionSegmenter().fit_transform(Frame(px))
    assert np.array_equal(seg.classes, segment_minip(Frame(px)).classes)


# --- colormap ---------------------------------------------------------------

def test_all_perfused_is_green():
    rgb = render_colormap(SegmentationMap(np.full((8, 8), SegClass.PERFUSED)))
    assert np.all(rgb == PALETTE["perfused"])


def test_single_vessel_pixel_is_red():
    classes = np.full((8, 8), SegClass.NON_PERFUSED)
    classes[3, 4] = SegClass.VESSEL
    rgb = render_colormap(SegmentationMap(classes))
    assert np.sum(np.all(rgb == PALETTE["vessel"], axis=-1)) == 1


def test_reperfused_overlay_wins():
    classes = np.zeros((8, 8), np.uint8)
    classes[:, 4:] = SegClass.NON_PERFUSED
    rep = np.zeros((8, 8), bool)
    rep[2:6, 2:6] = True
    rgb = render_colormap(SegmentationMap(classes), {"tdt": rep, "reperfused": rep})
    assert np.all(rgb[rep] == PALETTE["reperfused"])


def test_colormap_decodes():
    classes = np.random.default_rng(0).integers(0, 3, (8, 9)).astype(np.uint8)
    seg = SegmentationMap(classes)
    assert np.array_equal(decode_colormap(render_colormap(seg)).classes, classes)
