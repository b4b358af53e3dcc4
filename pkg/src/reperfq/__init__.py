"""Automatic reperfusion scoring from pre/post-treatment angiographic sequences."""
from .core import (
    Acquisition,
    AffineTransform2D,
    BrainMask,
    Frame,
    PhaseBoundaries,
    PhaseLabel,
    PhaseSequence,
    ScoreReport,
    SegClass,
    SegmentationMap,
    Stage,
    TRANSITIONS,
    View,
    ViewScore,
    validate_acquisition,
)
from .errors import IoError, PipelineError, ReperfqError, ValidationError
from .phases import PhaseClassifier, PhaseModel, classify, decode_constrained, phase_boundaries
from .projection import minip
from .quantification import PipelineConfig, QuantConfig, compute_autotici, score_patient, score_view
from .registration import AffineRegistration, MIConfig, mattes_mi, register_affine, select_atlas
from .segmentation import FrangiConfig, PerfusionSegmenter, frangi_vesselness, otsu_threshold, segment_minip

__version__ = "0.1.0"
