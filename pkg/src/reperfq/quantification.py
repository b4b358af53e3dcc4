"""autoTICI: the fraction of the pre-treatment occluded territory that is
perfused after treatment, measured inside an atlas-derived brain mask.

``score_view`` runs the whole per-view pipeline; its stages are exposed
separately (``prepare_stage`` and ``quantify_view``) so that a pipeline
assembled from files reproduces the one-shot result exactly.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import (
    Acquisition,
    BrainMask,
    Frame,
    PhaseBoundaries,
    ScoreReport,
    SegClass,
    SegmentationMap,
    View,
    ViewScore,
    check_same_shape,
)
from .errors import DimensionMismatch, InvalidConfig, NoCompleteViewPair, TdtTooSmall
from .geometry import warp_nearest
from .io import quantize
from .phases import classify, phase_boundaries
from .projection import minip
from .registration import MIConfig, _map, motion_correct, register_affine, select_atlas
from .segmentation import FrangiConfig, render_colormap, segment_minip

PIPELINE_BITS = 16


@dataclass(frozen=True)
class QuantConfig:
    include_vessels_as_perfused: bool = True
    min_tdt_pixels: int = 500

    def __post_init__(self):
        if int(self.min_tdt_pixels) < 1:
            raise InvalidConfig("min_tdt_pixels must be >= 1")


@dataclass(frozen=True)
class AutoTiciResult:
    score: float
    tdt_pixels: int
    reperfused_pixels: int
    tdt: np.ndarray = field(repr=False, compare=False)
    reperfused: np.ndarray = field(repr=False, compare=False)


def _mask_array(mask):
    return mask.inside if isinstance(mask, BrainMask) else np.asarray(mask, dtype=bool)


def compute_tdt(pre_seg, mask):
    """Pixels inside ``mask`` that are NonPerfused in the (warped) pre map."""
    inside = _mask_array(mask)
    check_same_shape(pre_seg.classes, inside, what="segmentation and mask")
    return inside & (pre_seg.classes == SegClass.NON_PERFUSED)


def perfused_pixels(post_seg, mask, include_vessels=True):
    inside = _mask_array(mask)
    check_same_shape(post_seg.classes, inside, what="segmentation and mask")
    perf = post_seg.classes == SegClass.PERFUSED
    if include_vessels:
        perf |= post_seg.classes == SegClass.VESSEL
    return inside & perf


def compute_autotici(pre, post, mask, cfg=QuantConfig()):
    """Score ``|TDT & P_post| / |TDT|``.

    Raises
    ------
    TdtTooSmall
        When the territory has fewer than ``cfg.min_tdt_pixels`` pixels.
    """
    if pre.shape != post.shape:
        raise DimensionMismatch(f"pre map {pre.shape} and post map {post.shape} differ")
    tdt = compute_tdt(pre, mask)
    n_tdt = int(tdt.sum())
    if n_tdt < cfg.min_tdt_pixels:
        raise TdtTooSmall(f"TDT has {n_tdt} pixels, below the minimum {cfg.min_tdt_pixels}")
    reperfused = tdt & perfused_pixels(post, mask, cfg.include_vessels_as_perfused)
    n_rep = int(reperfused.sum())
    return AutoTiciResult(n_rep / n_tdt, n_tdt, n_rep, tdt, reperfused)


# --- pipeline ---------------------------------------------------------------

def _fast_motion_config():
    return MIConfig(pyramid_factors=(2, 1), iterations_per_level=100)


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the per-patient pipeline.

    ``seed`` replaces the ``rng_seed`` of both registration configs.
    """

    registration: MIConfig = field(default_factory=MIConfig)
    motion_registration: MIConfig = field(default_factory=_fast_motion_config)
    frangi: FrangiConfig = field(default_factory=FrangiConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    atlas_mask_margin_px: int = 8
    model: Optional[str] = None
    atlas_dir: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed))
        if int(self.atlas_mask_margin_px) < 0:
            raise InvalidConfig("atlas_mask_margin_px must be >= 0")
        object.__setattr__(self, "registration", replace(self.registration, rng_seed=self.seed))
        object.__setattr__(self, "motion_registration",
                           replace(self.motion_registration, rng_seed=self.seed))

    _NESTED = {"registration": MIConfig, "motion_registration": MIConfig,
               "frangi": FrangiConfig, "quant": QuantConfig}

    @classmethod
    def from_dict(cls, data):
        """Build from a JSON-like mapping; unknown keys are rejected."""
        if not isinstance(data, dict):
            raise InvalidConfig("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {unknown}")
        kwargs = {}
        for key, value in data.items():
            sub = cls._NESTED.get(key)
            if sub is None:
                kwargs[key] = value
                continue
            if not isinstance(value, dict):
                raise InvalidConfig(f"{key} must be an object")
            allowed = {f.name for f in dataclasses.fields(sub)} - {"rng_seed"}
            bad = sorted(set(value) - allowed)
            if bad:
                raise InvalidConfig(f"unknown keys in {key}: {bad}")
            try:
                kwargs[key] = sub(**value)
            except TypeError as exc:
                raise InvalidConfig(str(exc)) from exc
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from exc

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                value = {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in dataclasses.asdict(value).items() if k != "rng_seed"}
            out[f.name] = value
        return out


def quantize_frame(frame, bits=PIPELINE_BITS):
    """Round a frame onto the grid of the on-disk image format."""
    maxval = 255 if bits == 8 else 65535
    return frame.with_pixels(quantize(frame.pixels, bits).astype(np.float64) / maxval)


@dataclass(frozen=True)
class StageResult:
    labels: object
    corrected: Acquisition
    minip: Frame
    segmentation: SegmentationMap


def prepare_stage(acq, model, cfg=PipelineConfig()):
    """Phases, motion correction, MINIP and segmentation for one acquisition.

    Intermediate images are held at the on-disk precision so that running the
    steps one by one from files gives the same numbers.
    """
    labels = classify(model, acq)
    corrected = motion_correct(acq, labels, cfg.motion_registration)
    corrected = corrected.replace_frames([quantize_frame(f) for f in corrected.frames])
    projection = quantize_frame(minip(corrected))
    return StageResult(labels, corrected, projection, segment_minip(projection, cfg.frangi))


@dataclass(frozen=True)
class ViewQuantification:
    result: AutoTiciResult
    pre_in_post: SegmentationMap
    mask: BrainMask
    atlas_index: int
    mi: dict


def quantify_view(pre_minip, post_minip, pre_seg, post_seg, atlases, cfg=PipelineConfig()):
    """Align pre to post, map the best atlas mask, and score."""
    pair = register_affine(post_minip, pre_minip, cfg.registration)
    pre_in_post = SegmentationMap(warp_nearest(pre_seg.classes, pair.transform,
                                               fill=int(SegClass.NON_PERFUSED)).astype(np.uint8))
    idx, atlas_res = select_atlas(atlases, post_minip, cfg.registration, cfg.atlas_mask_margin_px)
    atlas_mask = _mask_array(atlases[idx][1])
    mask = BrainMask(warp_nearest(atlas_mask, atlas_res.transform, fill=False).astype(bool))
    result = compute_autotici(pre_in_post, post_seg, mask, cfg.quant)
    mi = {"pre_to_post": pair.final_mi, "atlas": atlas_res.final_mi}
    return ViewQuantification(result, pre_in_post, mask, idx, mi)


def colormaps(pre_seg, post_seg, quant):
    """Colormap images for both stages in the post-treatment frame."""
    pre_rgb = render_colormap(quant.pre_in_post, {"mask": quant.mask, "tdt": quant.result.tdt})
    post_rgb = render_colormap(post_seg, {"mask": quant.mask, "tdt": quant.result.tdt,
                                          "reperfused": quant.result.reperfused})
    return {"pre": pre_rgb, "post": post_rgb}


def score_view(pre, post, atlases, model, cfg=PipelineConfig(), return_details=False):
    """Full per-view pipeline; returns a ViewScore (and details on request)."""
    if pre.view != post.view:
        raise DimensionMismatch(f"pre view {pre.view.value} differs from post view {post.view.value}")
    pre_stage = prepare_stage(pre, model, cfg)
    post_stage = prepare_stage(post, model, cfg)
    quant = quantify_view(pre_stage.minip, post_stage.minip, pre_stage.segmentation,
                          post_stage.segmentation, atlases, cfg)
    score = ViewScore(
        view=post.view,
        auto_tici=quant.result.score,
        tdt_pre_pixels=quant.result.tdt_pixels,
        reperfused_pixels=quant.result.reperfused_pixels,
        boundaries_pre=phase_boundaries(pre_stage.labels.labels),
        boundaries_post=phase_boundaries(post_stage.labels.labels),
        registration_mi=quant.mi,
    )
    if return_details:
        return score, {"pre": pre_stage, "post": post_stage, "quant": quant}
    return score


def combine_views(view_scores, patient_id, seed=0):
    """Report whose combined score is the mean over the given views."""
    view_scores = sorted(view_scores, key=lambda v: list(View).index(v.view))
    if not view_scores:
        raise NoCompleteViewPair("no complete pre/post view pair")
    combined = float(np.mean([v.auto_tici for v in view_scores]))
    return ScoreReport(patient_id, tuple(view_scores), combined, seed)


def complete_pairs(acquisitions):
    """``{view: (pre, post)}`` for views with both stages present.

    ``acquisitions`` maps ``View`` to a ``(pre, post)`` tuple whose entries
    may be ``None``.
    """
    return {View(v): pair for v, pair in acquisitions.items()
            if pair is not None and pair[0] is not None and pair[1] is not None}


def score_patient(acquisitions, atlases, model, cfg=PipelineConfig(), patient_id=None):
    """Score every complete view pair and average them.

    Parameters
    ----------
    acquisitions : dict
        ``{View: (pre, post)}``; missing stages may be ``None``.
    atlases : list of (Frame, BrainMask)
    model : PhaseModel

    Raises
    ------
    NoCompleteViewPair
    """
    pairs = complete_pairs(acquisitions)
    if not pairs:
        raise NoCompleteViewPair("no complete pre/post view pair")
    ordered = [v for v in View if v in pairs]
    scores = _map(lambda v: score_view(pairs[v][0], pairs[v][1], atlases, model, cfg), ordered)
    if patient_id is None:
        patient_id = pairs[ordered[0]][0].patient_id
    return combine_views(scores, patient_id, cfg.seed)
