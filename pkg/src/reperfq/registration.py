"""Affine registration driven by Mattes mutual information.

The metric is estimated from a Parzen-windowed joint histogram of randomly
sampled fixed-image positions (linear kernel on the fixed axis, cubic B-spline
on the moving axis). The optimizer is an adaptive stochastic gradient ascent:
finite-difference gradients on fresh samples each iteration, and a step size
``a / (A + t_k) ** alpha`` whose time variable ``t_k`` reacts to the agreement
of successive gradient directions.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator

from .core import AffineTransform2D, BrainMask, Frame, PhaseLabel
from .errors import (
    DimensionMismatch,
    Diverged,
    EmptyAtlasSet,
    InvalidConfig,
    NoUsableFrames,
    NotFitted,
)
from .geometry import warp

MIN_SAMPLES = 64
_N_PARAMS = 6


@dataclass(frozen=True)
class MIConfig:
    histogram_bins: int = 32
    samples_per_iter: int = 2048
    pyramid_factors: tuple = (4, 2, 1)
    iterations_per_level: int = 300
    step_a: float = 1.0
    step_A: float = 20.0
    step_alpha: float = 0.6
    fd_epsilon: tuple = (1e-3, 0.5)  # (matrix entries, translations in px)
    rng_seed: int = 0
    heldout_every: int = 5

    def __post_init__(self):
        object.__setattr__(self, "pyramid_factors", tuple(int(f) for f in self.pyramid_factors))
        object.__setattr__(self, "fd_epsilon", tuple(float(e) for e in self.fd_epsilon))
        if self.histogram_bins < 8:
            raise InvalidConfig("histogram_bins must be >= 8")
        if self.samples_per_iter < 256:
            raise InvalidConfig("samples_per_iter must be >= 256")
        f = self.pyramid_factors
        if not f or f[-1] != 1 or any(a <= b for a, b in zip(f, f[1:])):
            raise InvalidConfig("pyramid_factors must be strictly decreasing and end at 1")
        if self.iterations_per_level < 1:
            raise InvalidConfig("iterations_per_level must be >= 1")
        if len(self.fd_epsilon) != 2 or min(self.fd_epsilon) <= 0:
            raise InvalidConfig("fd_epsilon must hold two positive steps")


@dataclass(frozen=True)
class RegistrationResult:
    transform: AffineTransform2D
    final_mi: float
    iterations_used: int
    history: tuple = field(default=(), repr=False, compare=False)


# --- metric -----------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _joint_histograms(fixed_vals, xs, ys, params, cx, cy, moving, mask, use_mask,
                      f_lo, f_scale, m_lo, m_scale, hist, counts):
    n_sets = params.shape[0]
    n = xs.shape[0]
    h, w = moving.shape
    bins = hist.shape[1]
    f_bin = np.empty(n, dtype=np.int64)
    f_w1 = np.empty(n)
    for s in range(n):
        uf = (fixed_vals[s] - f_lo) * f_scale
        fi = int(math.floor(uf))
        if fi > bins - 2:
            fi = bins - 2
        if fi < 0:
            fi = 0
        f_bin[s] = fi
        f_w1[s] = uf - fi
    for k in range(n_sets):
        a11 = params[k, 0]
        a12 = params[k, 1]
        a21 = params[k, 2]
        a22 = params[k, 3]
        tx = params[k, 4]
        ty = params[k, 5]
        for s in range(n):
            dx = xs[s] - cx
            dy = ys[s] - cy
            mx = a11 * dx + a12 * dy + cx + tx
            my = a21 * dx + a22 * dy + cy + ty
            if not (mx >= 0.0 and mx <= w - 1 and my >= 0.0 and my <= h - 1):
                continue
            if use_mask:
                if not mask[int(math.floor(my + 0.5)), int(math.floor(mx + 0.5))]:
                    continue
            x0 = min(int(mx), w - 2)
            y0 = min(int(my), h - 2)
            fx = mx - x0
            fy = my - y0
            v = ((1.0 - fy) * ((1.0 - fx) * moving[y0, x0] + fx * moving[y0, x0 + 1])
                 + fy * ((1.0 - fx) * moving[y0 + 1, x0] + fx * moving[y0 + 1, x0 + 1]))
            um = 2.0 + (v - m_lo) * m_scale
            j1 = int(math.floor(um))
            t = um - j1
            t2 = t * t
            t3 = t2 * t
            u = 1.0 - t
            b0 = u * u * u / 6.0
            b1 = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0
            b2 = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0
            b3 = t3 / 6.0
            fi = f_bin[s]
            wf1 = f_w1[s]
            wf0 = 1.0 - wf1
            row0 = hist[k, fi]
            row1 = hist[k, fi + 1]
            row0[j1 - 1] += wf0 * b0
            row0[j1] += wf0 * b1
            row0[j1 + 1] += wf0 * b2
            row0[j1 + 2] += wf0 * b3
            row1[j1 - 1] += wf1 * b0
            row1[j1] += wf1 * b1
            row1[j1 + 1] += wf1 * b2
            row1[j1 + 2] += wf1 * b3
            counts[k] += 1


def _mi_from_histograms(hist, counts):
    """Mutual information (nats) per histogram; 0 where too few samples."""
    total = hist.sum(axis=(1, 2))
    ok = (counts >= MIN_SAMPLES) & (total > 0)
    p = hist / np.where(ok, total, 1.0)[:, None, None]
    outer = p.sum(axis=2)[:, :, None] * p.sum(axis=1)[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / np.where(p > 0, outer, 1.0)), 0.0)
    return np.where(ok, terms.sum(axis=(1, 2)), 0.0)


class _Metric:
    """Mattes MI between a fixed and a moving image at one resolution."""

    def __init__(self, fixed, moving, bins, mask=None):
        self.fixed = np.ascontiguousarray(fixed, dtype=np.float64)
        self.moving = np.ascontiguousarray(moving, dtype=np.float64)
        self.bins = bins
        self.use_mask = mask is not None
        if mask is None:
            self.mask = np.ones((1, 1), dtype=np.bool_)
            m_vals = self.moving
        else:
            self.mask = np.ascontiguousarray(mask, dtype=np.bool_)
            m_vals = self.moving[self.mask] if self.mask.any() else self.moving
        self.f_lo, f_hi = float(self.fixed.min()), float(self.fixed.max())
        self.m_lo, m_hi = float(m_vals.min()), float(m_vals.max())
        self.f_scale = (bins - 1) / (f_hi - self.f_lo) if f_hi > self.f_lo else 0.0
        self.m_scale = (bins - 5) / (m_hi - self.m_lo) if m_hi > self.m_lo else 0.0
        if self.use_mask and self.m_scale > 0:
            # interpolated values outside the masked range must stay in the padded bins
            full_lo, full_hi = float(self.moving.min()), float(self.moving.max())
            self.m_lo, m_hi = min(self.m_lo, full_lo), max(m_hi, full_hi)
            self.m_scale = (bins - 5) / (m_hi - self.m_lo)
        h, w = self.fixed.shape
        self.center = ((w - 1) / 2.0, (h - 1) / 2.0)

    def evaluate(self, param_sets, xs, ys, center):
        param_sets = np.ascontiguousarray(np.atleast_2d(param_sets), dtype=np.float64)
        hist = np.zeros((param_sets.shape[0], self.bins, self.bins))
        counts = np.zeros(param_sets.shape[0], dtype=np.int64)
        fixed_vals = self.fixed[ys, xs]
        _joint_histograms(fixed_vals, xs.astype(np.float64), ys.astype(np.float64), param_sets,
                          float(center[0]), float(center[1]), self.moving, self.mask, self.use_mask,
                          self.f_lo, self.f_scale, self.m_lo, self.m_scale, hist, counts)
        return _mi_from_histograms(hist, counts)


def _random_samples(rng, shape, n):
    h, w = shape
    return rng.integers(0, w, n), rng.integers(0, h, n)


def _grid_samples(shape, target):
    h, w = shape
    stride = max(1, int(math.sqrt(h * w / target)))
    ys, xs = np.mgrid[0:h:stride, 0:w:stride]
    return xs.ravel(), ys.ravel()


def _check_inputs(fixed, moving, mask):
    fx = fixed.pixels if isinstance(fixed, Frame) else np.asarray(fixed, dtype=np.float64)
    mv = moving.pixels if isinstance(moving, Frame) else np.asarray(moving, dtype=np.float64)
    m = None
    if mask is not None:
        m = mask.inside if isinstance(mask, BrainMask) else np.asarray(mask, dtype=bool)
        if m.shape != mv.shape:
            raise DimensionMismatch(f"mask shape {m.shape} differs from moving image {mv.shape}")
    return fx, mv, m


def mattes_mi(fixed, moving, t, cfg=MIConfig(), mask=None):
    """Mattes MI of ``fixed`` and ``moving`` resampled through ``t``, in nats."""
    fx, mv, m = _check_inputs(fixed, moving, mask)
    metric = _Metric(fx, mv, cfg.histogram_bins, m)
    xs, ys = _random_samples(np.random.default_rng(cfg.rng_seed), fx.shape, cfg.samples_per_iter)
    return float(metric.evaluate(t.params, xs, ys, t.center)[0])


def heldout_mi(fixed, moving, t, cfg=MIConfig(), mask=None):
    """MI on the deterministic full-resolution grid used to rank iterates."""
    fx, mv, m = _check_inputs(fixed, moving, mask)
    metric = _Metric(fx, mv, cfg.histogram_bins, m)
    xs, ys = _grid_samples(fx.shape, 4 * cfg.samples_per_iter)
    return float(metric.evaluate(t.params, xs, ys, t.center)[0])


# --- optimizer --------------------------------------------------------------

def _sigmoid_time_step(x, f_min=-0.8, f_max=1.0, omega=0.1):
    return f_min + (f_max - f_min) / (1.0 - (f_max / f_min) * math.exp(-x / omega))


def _smooth(image, factor):
    if factor <= 1:
        return image
    return ndimage.gaussian_filter(image, sigma=0.5 * factor, mode="nearest")


def register_affine(fixed, moving, cfg=MIConfig(), mask=None, initial=None):
    """Find the affine map from fixed to moving coordinates maximizing MI.

    Parameters
    ----------
    fixed, moving : Frame or 2D array
    cfg : MIConfig
    mask : BrainMask, optional
        Restricts samples to positions whose mapped point lies inside this
        mask on the moving image.
    initial : AffineTransform2D, optional
        Starting point; identity about the fixed image centre by default.

    Returns
    -------
    RegistrationResult
        Best transform seen on the final level's held-out grid.
    """
    fx, mv, m = _check_inputs(fixed, moving, mask)
    h, w = fx.shape
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    if initial is None:
        initial = AffineTransform2D.identity(center)
    elif not np.allclose(initial.center, center):
        raise DimensionMismatch("initial transform must be centred on the fixed image")
    theta = initial.params.astype(np.float64)
    radius = math.sqrt((w * w + h * h) / 12.0)
    scales = np.array([radius] * 4 + [1.0, 1.0])
    eps_theta = np.array([cfg.fd_epsilon[0]] * 4 + [cfg.fd_epsilon[1]] * 2)
    eps_z = eps_theta * scales
    rng = np.random.default_rng(cfg.rng_seed)
    perturb = np.concatenate([np.diag(eps_theta), -np.diag(eps_theta)])
    history = []
    iterations = 0
    best_theta, best_mi = theta.copy(), -math.inf

    for level, factor in enumerate(cfg.pyramid_factors):
        last_level = level == len(cfg.pyramid_factors) - 1
        metric = _Metric(_smooth(fx, factor), _smooth(mv, factor), cfg.histogram_bins, m)
        gx, gy = _grid_samples(fx.shape, 4 * cfg.samples_per_iter)

        def heldout(params):
            return float(metric.evaluate(params, gx, gy, center)[0])

        def gradient():
            xs, ys = _random_samples(rng, fx.shape, cfg.samples_per_iter)
            vals = metric.evaluate(theta + perturb, xs, ys, center)
            return (vals[:_N_PARAMS] - vals[_N_PARAMS:]) / (2.0 * eps_z)

        candidates = [theta.copy()]
        if last_level:
            candidates.append(initial.params)
        best_theta, best_mi = None, -math.inf
        for cand in candidates:
            v = heldout(cand)
            if v > best_mi:
                best_theta, best_mi = cand.copy(), v

        g_norm = np.mean([np.linalg.norm(gradient()) for _ in range(3)])
        if not np.isfinite(g_norm) or g_norm <= 0:
            theta = best_theta
            continue
        gain = cfg.step_a * factor * cfg.step_A ** cfg.step_alpha / g_norm
        t_k = 0.0
        prev = None
        for k in range(cfg.iterations_per_level):
            g = gradient()
            if prev is not None:
                denom = np.linalg.norm(g) * np.linalg.norm(prev)
                cos = float(g @ prev / denom) if denom > 0 else 0.0
                t_k = min(max(t_k + _sigmoid_time_step(-cos), 0.0), 2.0 * cfg.iterations_per_level)
            prev = g
            step = gain / (cfg.step_A + t_k) ** cfg.step_alpha
            theta = theta + step * g / scales
            iterations += 1
            if not np.all(np.isfinite(theta)):
                raise Diverged("registration parameters became non-finite")
            if (k + 1) % cfg.heldout_every == 0 or k == cfg.iterations_per_level - 1:
                v = heldout(theta)
                history.append((level, k, v))
                if v > best_mi:
                    best_theta, best_mi = theta.copy(), v
        theta = best_theta

    det = theta[0] * theta[3] - theta[1] * theta[2]
    if not np.all(np.isfinite(theta)) or det == 0:
        raise Diverged("registration produced an invalid transform")
    return RegistrationResult(AffineTransform2D.from_params(theta, center), float(best_mi),
                              iterations, tuple(history))


class AffineRegistration(BaseEstimator):
    """Estimator form of :func:`register_affine`.

    ``fit(fixed, moving)`` stores ``transform_``, ``final_mi_`` and
    ``n_iter_``; ``transform(image)`` resamples an image of the moving space
    onto the fixed grid.
    """

    def __init__(self, histogram_bins=32, samples_per_iter=2048, pyramid_factors=(4, 2, 1),
                 iterations_per_level=300, step_a=1.0, step_A=20.0, step_alpha=0.6,
                 fd_epsilon=(1e-3, 0.5), random_state=0):
        self.histogram_bins = histogram_bins
        self.samples_per_iter = samples_per_iter
        self.pyramid_factors = pyramid_factors
        self.iterations_per_level = iterations_per_level
        self.step_a = step_a
        self.step_A = step_A
        self.step_alpha = step_alpha
        self.fd_epsilon = fd_epsilon
        self.random_state = random_state

    @property
    def config(self):
        return MIConfig(self.histogram_bins, self.samples_per_iter, tuple(self.pyramid_factors),
                        self.iterations_per_level, self.step_a, self.step_A, self.step_alpha,
                        tuple(self.fd_epsilon), self.random_state)

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.histogram_bins, cfg.samples_per_iter, cfg.pyramid_factors,
                   cfg.iterations_per_level, cfg.step_a, cfg.step_A, cfg.step_alpha,
                   cfg.fd_epsilon, cfg.rng_seed)

    def fit(self, fixed, moving, mask=None):
        result = register_affine(fixed, moving, self.config, mask)
        self.result_ = result
        self.transform_ = result.transform
        self.final_mi_ = result.final_mi
        self.n_iter_ = result.iterations_used
        return self

    def transform(self, image):
        if not hasattr(self, "transform_"):
            raise NotFitted("AffineRegistration is not fitted")
        frame = image if isinstance(image, Frame) else Frame(image)
        return warp(frame, self.transform_)

    def fit_transform(self, fixed, moving, mask=None):
        return self.fit(fixed, moving, mask).transform(moving)


# --- pipeline uses ----------------------------------------------------------

def worker_count():
    try:
        n = int(os.environ.get("REPERFQ_THREADS", "0"))
    except ValueError:
        n = 0
    cpus = os.cpu_count() or 1
    return max(1, min(n, cpus) if n > 0 else cpus)


def _map(fn, items):
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


KEPT_PHASES = (PhaseLabel.ARTERIAL, PhaseLabel.PARENCHYMAL)


def kept_indices(labels):
    labels = np.asarray(labels.labels if hasattr(labels, "labels") else labels)
    return [i for i, lab in enumerate(labels) if lab in KEPT_PHASES]


def motion_correct(acq, labels, cfg=MIConfig(), return_results=False):
    """Keep arterial and parenchymal frames and align them to the middle one.

    ``labels`` is a PhaseSequence or a per-frame label array. Returns the
    corrected acquisition (kept frames only, original order) and, with
    ``return_results``, the per-frame registration results (``None`` for the
    reference frame).
    """
    labels = np.asarray(labels.labels if hasattr(labels, "labels") else labels)
    if len(labels) != len(acq.frames):
        raise DimensionMismatch("labels and frames differ in length")
    kept = kept_indices(labels)
    if not kept:
        raise NoUsableFrames("no arterial or parenchymal frames to carry forward")
    ref_idx = kept[len(kept) // 2]
    reference = acq.frames[ref_idx]

    def align(i):
        if i == ref_idx:
            return acq.frames[i], None
        res = register_affine(reference, acq.frames[i], cfg)
        return warp(acq.frames[i], res.transform), res

    out = _map(align, kept)
    corrected = acq.replace_frames([f for f, _ in out])
    if return_results:
        return corrected, [r for _, r in out]
    return corrected


def select_atlas(atlases, target, cfg=MIConfig(), mask_margin_px=0):
    """Register each ``(image, mask)`` atlas onto ``target``; keep the best MI.

    Samples are restricted to the atlas mask grown by ``mask_margin_px``
    pixels, so the brain outline itself contributes to the metric.
    Returns ``(index, RegistrationResult)``; ties go to the smaller index.
    """
    atlases = list(atlases)
    if not atlases:
        raise EmptyAtlasSet("no atlases supplied")

    def sampling_mask(mask):
        inside = mask.inside if isinstance(mask, BrainMask) else np.asarray(mask, dtype=bool)
        if mask_margin_px <= 0:
            return inside
        return ndimage.binary_dilation(inside, iterations=int(mask_margin_px))

    results = _map(lambda a: register_affine(target, a[0], cfg, mask=sampling_mask(a[1])), atlases)
    best = 0
    for i, res in enumerate(results):
        if res.final_mi > results[best].final_mi:
            best = i
    return best, results[best]
