"""Vessel / perfused / non-perfused segmentation of a MINIP.

Vessels come from a multi-scale Frangi filter tuned for dark tubular
structures; the remaining pixels are split into perfused (darker) and
non-perfused by Otsu's threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .core import BrainMask, Frame, SegClass, SegmentationMap
from .errors import DimensionMismatch, EmptyInput, InvalidConfig, NotFitted

PALETTE = {
    "vessel": (220, 40, 40),
    "perfused": (40, 180, 70),
    "non_perfused": (50, 80, 200),
    "tdt": (255, 255, 255),
    "reperfused": (255, 150, 40),
    "mask_outline": (180, 0, 0),
}


@dataclass(frozen=True)
class FrangiConfig:
    sigmas: tuple = (2.0, 4.0, 6.0, 8.0, 10.0, 12.0)
    blobness: float = 0.5
    structureness_gamma: float = 15.0
    response_threshold: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        s = self.sigmas
        if not s or min(s) < 1 or any(a >= b for a, b in zip(s, s[1:])):
            raise InvalidConfig("sigmas must be strictly increasing and >= 1")
        if not 0 < self.response_threshold < 1:
            raise InvalidConfig("response_threshold must lie in (0, 1)")
        if self.blobness <= 0 or self.structureness_gamma <= 0:
            raise InvalidConfig("blobness and structureness_gamma must be positive")


def _pixels(image):
    return image.pixels if isinstance(image, Frame) else np.asarray(image, dtype=np.float64)


def _derivative_kernels(sigma, truncate=4.0):
    """Sampled Gaussian and its first two derivatives.

    The second-derivative kernel is shifted by a multiple of the Gaussian so
    that it sums to zero; flat regions then have an exactly flat Hessian.
    """
    r = int(truncate * sigma + 0.5)
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-x**2 / (2 * sigma**2))
    g /= g.sum()
    d1 = -x / sigma**2 * g
    d2 = (x**2 / sigma**4 - 1 / sigma**2) * g
    d2 -= d2.sum() * g
    return g, d1, d2


def hessian_at_scale(image, sigma):
    """Scale-normalized Hessian eigenvalues ``(l1, l2)`` with ``|l1| <= |l2|``.

    ``image`` is expected on the 0-255 intensity scale.
    """
    img = np.asarray(image, dtype=np.float64)
    g, d1, d2 = _derivative_kernels(sigma)

    def sep(ky, kx):
        return ndimage.convolve1d(ndimage.convolve1d(img, ky, axis=0, mode="reflect"),
                                  kx, axis=1, mode="reflect")

    hyy = sep(d2, g) * sigma**2
    hxx = sep(g, d2) * sigma**2
    hxy = sep(d1, d1) * sigma**2
    mean = 0.5 * (hxx + hyy)
    root = np.sqrt((0.5 * (hxx - hyy)) ** 2 + hxy**2)
    mu1, mu2 = mean + root, mean - root
    swap = np.abs(mu1) > np.abs(mu2)
    l1 = np.where(swap, mu2, mu1)
    l2 = np.where(swap, mu1, mu2)
    return l1, l2


def vesselness_at_scale(l1, l2, blobness, gamma):
    """Dark-on-bright vesselness from sorted eigenvalues."""
    pos = l2 > 0
    safe = np.where(pos, l2, 1.0)
    rb2 = (l1 / safe) ** 2
    s2 = l1**2 + l2**2
    v = np.exp(-rb2 / (2 * blobness**2)) * (1 - np.exp(-s2 / (2 * gamma**2)))
    return np.where(pos, v, 0.0)


def frangi_vesselness(image, cfg=FrangiConfig()):
    """Maximum vesselness over ``cfg.sigmas``; ``image`` in [0, 1]."""
    img = _pixels(image) * 255.0
    out = np.zeros(img.shape)
    for sigma in cfg.sigmas:
        l1, l2 = hessian_at_scale(img, sigma)
        np.maximum(out, vesselness_at_scale(l1, l2, cfg.blobness, cfg.structureness_gamma), out=out)
    return out


def histogram_counts(values, bins=256):
    values = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, 1.0)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, bins - 1)
    return np.bincount(idx, minlength=bins), edges


def otsu_from_counts(counts):
    """Index ``k`` of the best split (classes ``< k`` and ``>= k``), or None.

    Between-class variance is compared exactly in integer arithmetic using bin
    centres, so ties are real ties and resolve to the smallest ``k``.
    """
    counts = [int(c) for c in counts]
    n = sum(counts)
    s = sum(c * (2 * i + 1) for i, c in enumerate(counts))
    best_k, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for k in range(1, len(counts)):
        n0 += counts[k - 1]
        s0 += counts[k - 1] * (2 * k - 1)
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (s0 * n - s * n0) ** 2
        den = n0 * n1
        if best_k is None or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k


def otsu_threshold(values, bins=256):
    """Bin-edge threshold maximizing between-class variance.

    Values below the threshold form the dark class. A single-class input
    returns its minimum value.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptyInput("Otsu threshold of an empty set")
    counts, edges = histogram_counts(values, bins)
    if np.count_nonzero(counts) < 2:
        return float(values.min())
    k = otsu_from_counts(counts)
    return float(edges[k])


def segment_minip(minip, cfg=FrangiConfig()):
    px = _pixels(minip)
    vessel = frangi_vesselness(px, cfg) > cfg.response_threshold
    classes = np.full(px.shape, SegClass.NON_PERFUSED, dtype=np.uint8)
    classes[vessel] = SegClass.VESSEL
    rest = ~vessel
    if rest.any():
        thr = otsu_threshold(px[rest])
        classes[rest & (px < thr)] = SegClass.PERFUSED
    return SegmentationMap(classes)


def _outline(inside):
    eroded = ndimage.binary_erosion(inside, structure=np.ones((3, 3), bool), border_value=0)
    return inside & ~eroded


def render_colormap(seg, overlay=None):
    """RGB image of a segmentation with optional mask/TDT/reperfused layers.

    ``overlay`` may hold ``mask`` (BrainMask or boolean array), ``tdt`` and
    ``reperfused`` (boolean arrays). Layers are painted in that order on top
    of the class colours, reperfused last.
    """
    classes = seg.classes
    rgb = np.zeros(classes.shape + (3,), dtype=np.uint8)
    rgb[classes == SegClass.VESSEL] = PALETTE["vessel"]
    rgb[classes == SegClass.PERFUSED] = PALETTE["perfused"]
    rgb[classes == SegClass.NON_PERFUSED] = PALETTE["non_perfused"]
    overlay = overlay or {}
    layers = []
    if overlay.get("mask") is not None:
        m = overlay["mask"]
        layers.append(("mask_outline", _outline(m.inside if isinstance(m, BrainMask) else np.asarray(m, bool))))
    for key in ("tdt", "reperfused"):
        if overlay.get(key) is not None:
            layers.append((key, np.asarray(overlay[key], dtype=bool)))
    for name, layer in layers:
        if layer.shape != classes.shape:
            raise DimensionMismatch(f"overlay {name} shape {layer.shape} differs from {classes.shape}")
        rgb[layer] = PALETTE[name]
    return rgb


def decode_colormap(rgb):
    """Recover class codes from a base colormap (no overlays)."""
    rgb = np.asarray(rgb)
    classes = np.full(rgb.shape[:2], 255, dtype=np.uint8)
    for cls, key in ((SegClass.VESSEL, "vessel"), (SegClass.PERFUSED, "perfused"),
                     (SegClass.NON_PERFUSED, "non_perfused")):
        classes[np.all(rgb == PALETTE[key], axis=-1)] = cls
    if np.any(classes == 255):
        raise ValueError("colormap contains colours outside the base palette")
    return SegmentationMap(classes)


class FrangiFilter(TransformerMixin, BaseEstimator):
    """Stateless transformer returning the multi-scale vesselness map."""

    def __init__(self, sigmas=(2.0, 4.0, 6.0, 8.0, 10.0, 12.0), blobness=0.5,
                 structureness_gamma=15.0, response_threshold=0.08):
        self.sigmas = sigmas
        self.blobness = blobness
        self.structureness_gamma = structureness_gamma
        self.response_threshold = response_threshold

    @property
    def config(self):
        return FrangiConfig(tuple(self.sigmas), self.blobness, self.structureness_gamma,
                            self.response_threshold)

    def fit(self, X=None, y=None):
        self.config_ = self.config
        return self

    def transform(self, X):
        return frangi_vesselness(X, self.config)


class PerfusionSegmenter(FrangiFilter):
    """``fit`` learns the vessel mask and Otsu threshold of one MINIP;
    ``transform`` returns its SegmentationMap."""

    def fit(self, X, y=None):
        cfg = self.config
        px = _pixels(X)
        self.vessel_mask_ = frangi_vesselness(px, cfg) > cfg.response_threshold
        rest = px[~self.vessel_mask_]
        self.threshold_ = otsu_threshold(rest) if rest.size else 0.0
        self.shape_ = px.shape
        return self

    def transform(self, X):
        if not hasattr(self, "threshold_"):
            raise NotFitted("PerfusionSegmenter is not fitted")
        px = _pixels(X)
        if px.shape != self.shape_:
            raise DimensionMismatch("image differs from the fitted shape")
        classes = np.full(px.shape, SegClass.NON_PERFUSED, dtype=np.uint8)
        classes[self.vessel_mask_] = SegClass.VESSEL
        classes[~self.vessel_mask_ & (px < self.threshold_)] = SegClass.PERFUSED
        return SegmentationMap(classes)
