"""Shared domain types.

Image arrays are indexed ``[row, col]`` = ``[y, x]``. Geometric quantities
(transforms, centroids, points) use ``(x, y)`` pixel coordinates with ``x``
to the right and ``y`` downwards. Intensities live in [0, 1] with dark meaning
contrast.
"""
from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidLabels,
    NonMonotonicTimes,
    OutOfRangeIntensity,
    ParseError,
    TooShort,
)

MIN_FRAMES = 6
MIN_SIZE = 8


class View(str, enum.Enum):
    AP = "AP"
    LATERAL = "lateral"


class Stage(str, enum.Enum):
    PRE = "pre"
    POST = "post"


class PhaseLabel(enum.IntEnum):
    NON_CONTRAST = 0
    ARTERIAL = 1
    PARENCHYMAL = 2
    VENOUS = 3


N_PHASES = len(PhaseLabel)


class SegClass(enum.IntEnum):
    VESSEL = 0
    PERFUSED = 1
    NON_PERFUSED = 2


def _readonly(array):
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Frame:
    """One grayscale image; ``pixels`` has shape ``(height, width)``."""

    pixels: np.ndarray
    time_s: Optional[float] = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise DimensionMismatch(f"frame must be 2D, got shape {pixels.shape}")
        h, w = pixels.shape
        if h < MIN_SIZE or w < MIN_SIZE:
            raise DimensionMismatch(f"frame must be at least {MIN_SIZE}x{MIN_SIZE}, got {w}x{h}")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise OutOfRangeIntensity("frame intensities must be finite and within [0, 1]")
        object.__setattr__(self, "pixels", _readonly(pixels))
        if self.time_s is not None:
            object.__setattr__(self, "time_s", float(self.time_s))

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def shape(self):
        return self.pixels.shape

    def with_pixels(self, pixels):
        return Frame(pixels, self.time_s)


@dataclass(frozen=True, eq=False)
class Acquisition:
    frames: tuple
    view: View = View.AP
    stage: Stage = Stage.PRE
    patient_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "view", View(self.view))
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(self, "patient_id", str(self.patient_id))

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].shape

    @property
    def times(self):
        """Frame times, or ``None`` unless every frame carries one."""
        times = [f.time_s for f in self.frames]
        if any(t is None for t in times):
            return None
        return np.asarray(times, dtype=np.float64)

    def stack(self):
        return np.stack([f.pixels for f in self.frames])

    def replace_frames(self, frames):
        return Acquisition(tuple(frames), self.view, self.stage, self.patient_id)


def validate_acquisition(acq):
    """Check the acquisition invariants and return ``acq`` unchanged."""
    n = len(acq.frames)
    if n < MIN_FRAMES:
        raise TooShort(f"acquisition has {n} frames; at least {MIN_FRAMES} are required")
    shape = acq.frames[0].shape
    for i, frame in enumerate(acq.frames):
        if frame.shape != shape:
            raise DimensionMismatch(f"frame {i} has shape {frame.shape}, expected {shape}")
        px = frame.pixels
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise OutOfRangeIntensity(f"frame {i} has intensities outside [0, 1]")
    times = [f.time_s for f in acq.frames if f.time_s is not None]
    if len(times) > 1 and np.any(np.diff(times) <= 0):
        raise NonMonotonicTimes("frame times must be strictly increasing")
    return acq


# Allowed phase transitions between consecutive frames.
TRANSITIONS = np.array(
    [
        [1, 1, 0, 0],
        [0, 1, 1, 0],
        [0, 0, 1, 1],
        [1, 0, 0, 1],
    ],
    dtype=np.int8,
)
TRANSITIONS.setflags(write=False)


def is_valid_sequence(labels, transitions=TRANSITIONS):
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        return True
    if labels.min() < 0 or labels.max() >= transitions.shape[0]:
        return False
    return bool(np.all(transitions[labels[:-1], labels[1:]] == 1))


@dataclass(frozen=True, eq=False)
class PhaseSequence:
    probabilities: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probabilities, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if probs.ndim != 2 or probs.shape[1] != N_PHASES:
            raise DimensionMismatch(f"probabilities must have shape (n, {N_PHASES})")
        if labels.shape != (probs.shape[0],):
            raise InvalidLabels("labels and probabilities differ in length")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
            raise InvalidLabels("each probability vector must be non-negative and sum to 1")
        if not is_valid_sequence(labels):
            raise InvalidLabels("label sequence violates the phase transition rules")
        object.__setattr__(self, "probabilities", _readonly(probs))
        object.__setattr__(self, "labels", _readonly(labels))

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class AffineTransform2D:
    """Planar affine map ``p' = A (p - c) + c + t`` in pixel coordinates."""

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        values = [self.a11, self.a12, self.a21, self.a22, self.tx, self.ty, self.cx, self.cy]
        if not all(math.isfinite(float(v)) for v in values):
            raise ValueError("affine transform entries must be finite")
        if self.a11 * self.a22 - self.a12 * self.a21 == 0.0:
            raise ValueError("affine matrix is singular")

    @classmethod
    def identity(cls, center=(0.0, 0.0)):
        return cls(cx=float(center[0]), cy=float(center[1]))

    @classmethod
    def centered_on(cls, shape):
        """Identity centred on an image of ``shape = (height, width)``."""
        h, w = shape
        return cls.identity(((w - 1) / 2.0, (h - 1) / 2.0))

    @classmethod
    def from_params(cls, params, center):
        a11, a12, a21, a22, tx, ty = (float(p) for p in params)
        return cls(a11, a12, a21, a22, tx, ty, float(center[0]), float(center[1]))

    @classmethod
    def similarity(cls, angle_deg=0.0, scale=1.0, translation=(0.0, 0.0), center=(0.0, 0.0)):
        th = math.radians(angle_deg)
        c, s = math.cos(th) * scale, math.sin(th) * scale
        return cls(c, -s, s, c, float(translation[0]), float(translation[1]),
                   float(center[0]), float(center[1]))

    @property
    def params(self):
        return np.array([self.a11, self.a12, self.a21, self.a22, self.tx, self.ty])

    @property
    def matrix(self):
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def center(self):
        return np.array([self.cx, self.cy])

    @property
    def translation(self):
        return np.array([self.tx, self.ty])

    @property
    def angle_deg(self):
        return math.degrees(math.atan2(self.a21 - self.a12, self.a11 + self.a22))

    def apply(self, points):
        """Map an ``(..., 2)`` array of ``(x, y)`` points."""
        pts = np.asarray(points, dtype=np.float64)
        c = self.center
        return (pts - c) @ self.matrix.T + c + self.translation

    def inverse(self):
        inv = np.linalg.inv(self.matrix)
        t = -inv @ self.translation
        return AffineTransform2D(inv[0, 0], inv[0, 1], inv[1, 0], inv[1, 1],
                                 t[0], t[1], self.cx, self.cy)

    def compose(self, other):
        """Return ``self ∘ other`` (apply ``other`` first), centred like ``other``."""
        A = self.matrix @ other.matrix
        c = other.center
        # self(other(c)) gives the translation relative to c
        t = self.apply(other.apply(c)) - c
        return AffineTransform2D(A[0, 0], A[0, 1], A[1, 0], A[1, 1], t[0], t[1], c[0], c[1])

    def to_dict(self):
        return {k: float(getattr(self, k)) for k in ("a11", "a12", "a21", "a22", "tx", "ty", "cx", "cy")}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**{k: float(data[k]) for k in ("a11", "a12", "a21", "a22", "tx", "ty", "cx", "cy")})
        except (KeyError, TypeError) as exc:
            raise ParseError(f"invalid transform document: {exc}") from exc


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    classes: np.ndarray

    def __post_init__(self):
        classes = np.asarray(self.classes)
        if classes.ndim != 2:
            raise DimensionMismatch("segmentation map must be 2D")
        if classes.size and (classes.min() < 0 or classes.max() > 2):
            raise ValueError("segmentation classes must be 0 (vessel), 1 (perfused) or 2 (non-perfused)")
        object.__setattr__(self, "classes", _readonly(classes.astype(np.uint8)))

    @property
    def shape(self):
        return self.classes.shape

    @property
    def width(self):
        return self.classes.shape[1]

    @property
    def height(self):
        return self.classes.shape[0]

    def counts(self):
        """Pixel count per class, keyed by lowercase class name."""
        n = np.bincount(self.classes.ravel(), minlength=3)
        return {c.name.lower(): int(n[c]) for c in SegClass}


@dataclass(frozen=True, eq=False)
class BrainMask:
    inside: np.ndarray

    def __post_init__(self):
        inside = np.asarray(self.inside, dtype=bool)
        if inside.ndim != 2:
            raise DimensionMismatch("brain mask must be 2D")
        object.__setattr__(self, "inside", _readonly(inside))

    @property
    def shape(self):
        return self.inside.shape

    @property
    def fraction(self):
        return float(self.inside.mean())


@dataclass(frozen=True)
class PhaseBoundaries:
    first_arterial: Optional[int] = None
    last_arterial: Optional[int] = None
    last_parenchymal: Optional[int] = None

    def to_dict(self):
        return {
            "first_arterial": self.first_arterial,
            "last_arterial": self.last_arterial,
            "last_parenchymal": self.last_parenchymal,
        }


@dataclass(frozen=True)
class ViewScore:
    view: View
    auto_tici: float
    tdt_pre_pixels: int
    reperfused_pixels: int
    boundaries_pre: PhaseBoundaries = field(default_factory=PhaseBoundaries)
    boundaries_post: PhaseBoundaries = field(default_factory=PhaseBoundaries)
    registration_mi: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.auto_tici <= 1.0:
            raise ValueError("autoTICI must lie in [0, 1]")
        if self.reperfused_pixels > self.tdt_pre_pixels:
            raise ValueError("reperfused pixels cannot exceed TDT pixels")


@dataclass(frozen=True)
class ScoreReport:
    patient_id: str
    per_view: tuple
    combined_auto_tici: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "per_view", tuple(self.per_view))
        if not 0.0 <= self.combined_auto_tici <= 1.0:
            raise ValueError("autoTICI must lie in [0, 1]")

    @property
    def views(self):
        return [v.view for v in self.per_view]


def serialize_acquisition(acq):
    """Bit-exact binary serialization (numpy ``.npz``)."""
    meta = {
        "view": acq.view.value,
        "stage": acq.stage.value,
        "patient_id": acq.patient_id,
        "times": [f.time_s for f in acq.frames],
    }
    buf = io.BytesIO()
    np.savez(buf, pixels=acq.stack(), meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
    return buf.getvalue()


def deserialize_acquisition(data):
    with np.load(io.BytesIO(data)) as npz:
        pixels = npz["pixels"]
        meta = json.loads(npz["meta"].tobytes().decode())
    frames = [Frame(p, t) for p, t in zip(pixels, meta["times"])]
    return Acquisition(tuple(frames), View(meta["view"]), Stage(meta["stage"]), meta["patient_id"])


def check_same_shape(*arrays: Sequence, what="inputs"):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) > 1:
        raise DimensionMismatch(f"{what} differ in shape: {sorted(shapes)}")
