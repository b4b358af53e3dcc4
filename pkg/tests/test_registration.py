import math

import numpy as np
import pytest
from scipy import ndimage

from reperfq import phantom
from reperfq.core import AffineTransform2D, BrainMask, Frame
from reperfq.errors import DimensionMismatch, EmptyAtlasSet, InvalidConfig, NoUsableFrames
from reperfq.geometry import warp, warp_array, warp_nearest
from reperfq.registration import (
    AffineRegistration,
    MIConfig,
    heldout_mi,
    mattes_mi,
    motion_correct,
    register_affine,
    select_atlas,
)

CENTRE_64 = (31.5, 31.5)


def _identity(shape):
    h, w = shape
    return AffineTransform2D.identity(((w - 1) / 2, (h - 1) / 2))


def _half_image(size=64):
    px = np.ones((size, size))
    px[:, : size // 2] = 0.0
    return Frame(px)


def _displacement(t, truth, shape, mask=None):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    d = np.linalg.norm(t.apply(pts) - truth.apply(pts), axis=1)
    if mask is not None:
        d = d[mask.ravel()]
    return d.mean()


# --- metric -----------------------------------------------------------------

def test_two_level_image_has_ln2():
    img = _half_image()
    assert abs(mattes_mi(img, img, _identity(img.shape)) - math.log(2)) < 0.05


def test_independent_noise_has_low_mi():
    rng = np.random.default_rng(0)
    a, b = Frame(rng.random((256, 256))), Frame(rng.random((256, 256)))
    cfg = MIConfig(samples_per_iter=8192)
    assert mattes_mi(a, b, _identity(a.shape), cfg) < 0.05


def test_all_samples_off_image_give_zero():
    img = _half_image()
    far = AffineTransform2D.similarity(0, 1, (500.0, 0.0), CENTRE_64)
    assert mattes_mi(img, img, far) == 0.0


def test_metric_is_seeded():
    img = phantom.vessel_image(64, seed=3)
    t = AffineTransform2D.similarity(2.0, 1.0, (1.5, 0.0), CENTRE_64)
    assert mattes_mi(img, img, t, MIConfig(rng_seed=4)) == mattes_mi(img, img, t, MIConfig(rng_seed=4))


def test_metric_symmetry_under_inverse():
    img = phantom.vessel_image(128, seed=1)
    t = AffineTransform2D.similarity(4.0, 1.0, (3.0, -2.0), (63.5, 63.5))
    moved = warp(img, t)
    forward = mattes_mi(img, moved, t.inverse())
    backward = mattes_mi(moved, img, t)
    assert abs(forward - backward) < 0.05


def test_mask_shape_checked():
    img = _half_image()
    with pytest.raises(DimensionMismatch):
        mattes_mi(img, img, _identity(img.shape), mask=np.ones((8, 8), bool))


def test_mask_restricts_samples():
    img = _half_image()
    mask = np.zeros(img.shape, bool)
    mask[:, 40:] = True
    assert mattes_mi(img, img, _identity(img.shape), mask=mask) < 0.01


def test_config_validation():
    with pytest.raises(InvalidConfig):
        MIConfig(histogram_bins=4)
    with pytest.raises(InvalidConfig):
        MIConfig(samples_per_iter=100)
    with pytest.raises(InvalidConfig):
        MIConfig(pyramid_factors=(2, 4, 1))
    with pytest.raises(InvalidConfig):
        MIConfig(pyramid_factors=(4, 2))


# --- warp -------------------------------------------------------------------

def test_identity_warp_is_exact():
    img = phantom.vessel_image(64, seed=0)
    assert np.array_equal(warp(img, _identity(img.shape)).pixels, img.pixels)


def test_integer_shift_is_exact():
    img = phantom.vessel_image(64, seed=0)
    shifted = warp(img, AffineTransform2D.similarity(0, 1, (3.0, 0.0), CENTRE_64)).pixels
    assert np.array_equal(shifted[:, :-3], img.pixels[:, 3:])
    assert np.all(shifted[:, -3:] == 1.0)


def test_warp_round_trip_on_smooth_image():
    img = Frame(ndimage.gaussian_filter(phantom.vessel_image(128, seed=2).pixels, 2.0))
    t = AffineTransform2D.similarity(6.0, 1.05, (2.3, -1.7), (63.5, 63.5))
    back = warp(warp(img, t), t.inverse()).pixels
    assert np.max(np.abs(back - img.pixels)[16:-16, 16:-16]) <= 0.02


def test_nearest_warp_keeps_labels():
    labels = np.arange(64, dtype=np.uint8).reshape(8, 8)
    t = AffineTransform2D.similarity(0, 1, (1.0, 2.0), (3.5, 3.5))
    out = warp_nearest(labels, t, fill=255)
    assert np.array_equal(out[:-2, :-1], labels[2:, 1:])
    assert np.all(out[-2:] == 255)


# --- registration -----------------------------------------------------------

@pytest.fixture(scope="module")
def vessels_256():
    return phantom.vessel_image(256, seed=0)


def test_self_registration_stays_at_identity(vessels_256):
    res = register_affine(vessels_256, vessels_256)
    t = res.transform
    assert abs(t.tx) < 0.25 and abs(t.ty) < 0.25
    assert np.max(np.abs(t.matrix - np.eye(2))) < 0.005
    ident = _identity(vessels_256.shape)
    assert res.final_mi >= heldout_mi(vessels_256, vessels_256, ident) - 1e-3


def test_translation_recovery(vessels_256):
    centre = (127.5, 127.5)
    moving = warp(vessels_256, AffineTransform2D.similarity(0, 1, (-7.0, 4.0), centre))
    t = register_affine(vessels_256, moving).transform
    assert abs(t.tx - 7.0) < 0.5 and abs(t.ty + 4.0) < 0.5


def test_rotation_recovery(vessels_256):
    centre = (127.5, 127.5)
    moving = warp(vessels_256, AffineTransform2D.similarity(-5.0, 1, (0.0, 0.0), centre))
    t = register_affine(vessels_256, moving).transform
    assert abs(t.angle_deg - 5.0) < 0.5


def test_registration_is_deterministic():
    img = phantom.vessel_image(64, seed=5)
    moving = warp(img, AffineTransform2D.similarity(2, 1, (2.0, 1.0), CENTRE_64))
    cfg = MIConfig(iterations_per_level=40)
    assert register_affine(img, moving, cfg).transform == register_affine(img, moving, cfg).transform


def test_estimator_wrapper():
    img = phantom.vessel_image(64, seed=5)
    moving = warp(img, AffineTransform2D.similarity(0, 1, (-2.0, 0.0), CENTRE_64))
    reg = AffineRegistration(iterations_per_level=60).fit(img, moving)
    assert abs(reg.transform_.tx - 2.0) < 0.5
    aligned = reg.transform(moving)
    assert np.mean(np.abs(aligned.pixels - img.pixels)[8:-8, 8:-8]) < 0.02
    assert AffineRegistration.from_config(reg.config).get_params() == reg.get_params()


# --- motion correction ------------------------------------------------------

def test_still_sequence_is_unchanged():
    case = phantom.generate(phantom.PhantomSpec(jitter_px=0.0, noise_sigma=0.0, rng_seed=2))
    cfg = MIConfig(pyramid_factors=(2, 1), iterations_per_level=100)
    out, results = motion_correct(case.pre, case.labels_pre, cfg, return_results=True)
    kept = [f for f, lab in zip(case.pre.frames, case.labels_pre) if lab in (1, 2)]
    assert len(out.frames) == len(kept)
    for a, b, res in zip(out.frames, kept, results):
        assert a.time_s == b.time_s
        assert np.mean(np.abs(a.pixels - b.pixels)[8:-8, 8:-8]) < 0.005
        if res is not None:
            assert _displacement(res.transform, _identity(b.shape), b.shape) < 0.25


def test_jitter_is_removed():
    case = phantom.generate(phantom.PhantomSpec(jitter_px=5.0, rng_seed=4))
    cfg = MIConfig(pyramid_factors=(2, 1), iterations_per_level=100)
    _, results = motion_correct(case.pre, case.labels_pre, cfg, return_results=True)
    kept = [i for i, lab in enumerate(case.labels_pre) if lab in (1, 2)]
    ref = kept[len(kept) // 2]
    residuals = []
    for i, res in zip(kept, results):
        if res is None:
            assert i == ref
            continue
        truth = case.jitter_pre[i].compose(case.jitter_pre[ref].inverse())
        residuals.append(_displacement(res.transform, truth, case.mask.inside.shape, case.mask.inside))
    assert np.mean(residuals) <= 1.0


def test_all_venous_has_no_usable_frames(acquisition):
    with pytest.raises(NoUsableFrames):
        motion_correct(acquisition, [3] * len(acquisition.frames))


# --- atlas selection --------------------------------------------------------

def test_selects_the_target_copy():
    target, mask = phantom.make_atlas(0)
    rng = np.random.default_rng(0)
    noise = [(Frame(rng.random(target.shape)), mask) for _ in range(2)]
    idx, _ = select_atlas([noise[0], (target, mask), noise[1]], target, MIConfig(iterations_per_level=50))
    assert idx == 1


def test_single_atlas():
    target, mask = phantom.make_atlas(0)
    rng = np.random.default_rng(1)
    idx, _ = select_atlas([(Frame(rng.random(target.shape)), mask)], target,
                          MIConfig(iterations_per_level=20))
    assert idx == 0


def test_identical_atlases_tie_to_first():
    target, mask = phantom.make_atlas(1)
    other, _ = phantom.make_atlas(2)
    idx, _ = select_atlas([(other, mask), (other, mask)], target, MIConfig(iterations_per_level=30))
    assert idx == 0


def test_empty_atlas_set():
    with pytest.raises(EmptyAtlasSet):
        select_atlas([], _half_image())


def test_atlas_mask_types_accepted():
    target, mask = phantom.make_atlas(0)
    idx, res = select_atlas([(target, BrainMask(mask.inside))], target,
                            MIConfig(iterations_per_level=20), mask_margin_px=4)
    assert idx == 0 and res.final_mi > 0
