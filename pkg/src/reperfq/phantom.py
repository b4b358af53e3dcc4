"""Synthetic angiographic sequences with known ground truth.

A phantom is an elliptical "brain" framed by a faint skull rim, a vessel
tree entering from the bottom, a wedge-shaped territory that stays
unperfused before treatment, and a superior midline band that fills in the
venous phase. Intensities follow piecewise-linear time curves per phase;
each frame gets a random rigid jitter and additive Gaussian noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import (
    Acquisition,
    AffineTransform2D,
    BrainMask,
    Frame,
    PhaseLabel,
    Stage,
    View,
)
from .errors import InvalidSpec
from .geometry import warp_array

RIM_WIDTH = 4.0
RIM_DARKNESS = 0.3
TISSUE_BLUR = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 128
    height: int = 128
    n_frames: Optional[int] = None
    phase_plan: tuple = (2, 4, 5, 3)
    vessels: Optional[tuple] = None  # ((points, width_px), ...) in pixel (x, y)
    territory: Optional[tuple] = None  # polygon vertices (x, y)
    reperfused_fraction: float = 0.5
    jitter_px: float = 2.0
    noise_sigma: float = 0.01
    rng_seed: int = 0
    view: str = "AP"
    patient_id: str = "phantom"
    frame_interval_s: float = 0.5
    brain_axes: tuple = (0.40, 0.38)  # semi-axes as fractions of width / height
    brain_offset: tuple = (0.0, 0.0)  # centre offset in px
    vessel_margin_px: float = 12.0
    occlusion: bool = True

    def __post_init__(self):
        plan = tuple(int(n) for n in self.phase_plan)
        object.__setattr__(self, "phase_plan", plan)
        if len(plan) != 4 or min(plan) < 0 or sum(plan) == 0:
            raise InvalidSpec("phase_plan must hold four non-negative frame counts")
        n = sum(plan)
        if self.n_frames is None:
            object.__setattr__(self, "n_frames", n)
        elif int(self.n_frames) != n:
            raise InvalidSpec(f"phase_plan sums to {n}, n_frames is {self.n_frames}")
        if not 0.0 <= self.reperfused_fraction <= 1.0:
            raise InvalidSpec("reperfused_fraction must lie in [0, 1]")
        if not 0.0 <= self.jitter_px <= 10.0:
            raise InvalidSpec("jitter_px must lie in [0, 10]")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be non-negative")
        if self.width < 32 or self.height < 32:
            raise InvalidSpec("phantoms must be at least 32x32")
        try:
            View(self.view)
        except ValueError as exc:
            raise InvalidSpec(str(exc)) from exc

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidSpec(f"unknown phantom spec keys {sorted(unknown)}")
        data = dict(data)
        if data.get("vessels") is not None:
            data["vessels"] = tuple((tuple(map(tuple, pts)), float(w)) for pts, w in data["vessels"])
        if data.get("territory") is not None:
            data["territory"] = tuple(tuple(p) for p in data["territory"])
        for key in ("phase_plan", "brain_axes", "brain_offset"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass(frozen=True, eq=False)
class PhantomCase:
    pre: Acquisition
    post: Acquisition
    labels_pre: np.ndarray
    labels_post: np.ndarray
    mask: BrainMask
    territory: np.ndarray
    reperfused: np.ndarray
    f: float
    jitter_pre: tuple = field(default=(), repr=False)
    jitter_post: tuple = field(default=(), repr=False)


# --- geometry helpers -------------------------------------------------------

def _brain_geometry(spec):
    cx = (spec.width - 1) / 2.0 + spec.brain_offset[0]
    cy = (spec.height - 1) / 2.0 + 0.03 * spec.height + spec.brain_offset[1]
    return cx, cy, spec.brain_axes[0] * spec.width, spec.brain_axes[1] * spec.height


def _ellipse_radius(spec, shape):
    cx, cy, ax, ay = _brain_geometry(spec)
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    return np.sqrt(((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2)


def rasterize_polygon(vertices, shape):
    """Even-odd fill of a polygon at pixel centres."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    inside = np.zeros(shape, dtype=bool)
    pts = np.asarray(vertices, dtype=np.float64)
    for (x0, y0), (x1, y1) in zip(pts, np.roll(pts, -1, axis=0)):
        if y0 == y1:
            continue
        crosses = (ys >= min(y0, y1)) & (ys < max(y0, y1))
        x_at = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xs < x_at)
    return inside


def _segment_distance(xs, ys, p0, p1):
    p0 = np.asarray(p0, float)
    d = np.asarray(p1, float) - p0
    L2 = float(d @ d)
    if L2 == 0:
        return np.hypot(xs - p0[0], ys - p0[1])
    t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(xs - (p0[0] + t * d[0]), ys - (p0[1] + t * d[1]))


def render_vessels(vessels, shape):
    """Anti-aliased vessel opacity in [0, 1]."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros(shape)
    for pts, width in vessels:
        for p0, p1 in zip(pts[:-1], pts[1:]):
            dist = _segment_distance(xs, ys, p0, p1)
            np.maximum(out, np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0), out=out)
    return out


def _territory_direction(spec, rng):
    if View(spec.view) is View.AP:
        return math.radians(rng.uniform(-15, 15)), math.radians(rng.uniform(38, 48))
    return math.radians(-35 + rng.uniform(-15, 15)), math.radians(rng.uniform(38, 48))


def default_territory(spec, direction):
    """A wedge from just off the brain centre to the brain edge."""
    cx, cy, ax, ay = _brain_geometry(spec)
    phi, half = direction
    apex = (cx + 0.22 * ax * math.cos(phi), cy + 0.22 * ay * math.sin(phi))
    arc = [(cx + 0.97 * ax * math.cos(a), cy + 0.97 * ay * math.sin(a))
           for a in np.linspace(phi - half, phi + half, 24)]
    return (apex,) + tuple(arc)


def default_vessels(spec, rng, avoid_angle=None):
    """Trunk from the skull base plus radial branches with side twigs."""
    cx, cy, ax, ay = _brain_geometry(spec)
    hub = (cx + rng.uniform(-2, 2), cy + 0.1 * ay)
    trunk = ((cx, cy + 0.98 * ay), hub)
    vessels = [(trunk, 7.0)]
    n_branch = 7
    base = rng.uniform(0, 2 * math.pi)
    for i in range(n_branch):
        a = base + 2 * math.pi * i / n_branch + rng.uniform(-0.2, 0.2)
        if avoid_angle is not None:
            phi, half = avoid_angle
            if abs(math.remainder(a - phi, 2 * math.pi)) < half + 0.35:
                continue
        r_end = rng.uniform(0.75, 0.88)
        mid_r = 0.5 * r_end
        bend = rng.uniform(-0.25, 0.25)
        mid = (hub[0] + mid_r * ax * math.cos(a + bend), hub[1] + mid_r * ay * math.sin(a + bend))
        end = (cx + r_end * ax * math.cos(a), cy + r_end * ay * math.sin(a))
        vessels.append(((hub, mid, end), float(rng.uniform(4.0, 5.5))))
        twig_a = a + rng.choice([-1, 1]) * rng.uniform(0.5, 0.8)
        twig_end = (mid[0] + 0.3 * ax * math.cos(twig_a), mid[1] + 0.3 * ay * math.sin(twig_a))
        vessels.append(((mid, twig_end), 3.0))
    return tuple(vessels)


# --- time curves ------------------------------------------------------------

def phase_labels(plan):
    return np.concatenate([np.full(n, code, dtype=np.int64) for code, n in zip(PhaseLabel, plan)])


def time_curves(plan):
    """Per-frame (vessel, tissue, sinus) darkness from the phase plan."""
    curves = []
    for code, n in zip(PhaseLabel, plan):
        for i in range(n):
            u = (i + 0.5) / n
            if code is PhaseLabel.NON_CONTRAST:
                curves.append((0.0, 0.0, 0.0))
            elif code is PhaseLabel.ARTERIAL:
                curves.append((0.35 + 0.5 * u, 0.1 * u, 0.0))
            elif code is PhaseLabel.PARENCHYMAL:
                curves.append((0.85 - 0.45 * u, 0.25 + 0.35 * min(1.0, 1.6 * u), 0.0))
            else:
                curves.append((0.35 * (1 - u), 0.45 * (1 - u), 0.7))
    return np.asarray(curves)


# --- rendering --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Layers:
    rim: np.ndarray
    vessels_pre: np.ndarray
    vessels_post: np.ndarray
    tissue_pre: np.ndarray
    tissue_post: np.ndarray
    sinus: np.ndarray
    mask: np.ndarray
    territory: np.ndarray
    reperfused: np.ndarray


def _reperfused_part(territory, apex, f):
    idx = np.flatnonzero(territory.ravel())
    n = int(round(f * idx.size))
    part = np.zeros(territory.shape, dtype=bool)
    if n == 0:
        return part
    ys, xs = np.unravel_index(idx, territory.shape)
    ang = np.arctan2(ys - apex[1], xs - apex[0])
    ref = float(np.median(ang))
    rel = np.remainder(ang - ref + math.pi, 2 * math.pi)
    order = np.lexsort((idx, rel))
    part.ravel()[idx[order[:n]]] = True
    return part


def build_layers(spec, rng=None):
    if rng is None:
        rng = np.random.default_rng(spec.rng_seed)
    shape = (spec.height, spec.width)
    r = _ellipse_radius(spec, shape)
    cx, cy, ax, ay = _brain_geometry(spec)
    mask = r < 1.0
    d = (r - 1.0) * min(ax, ay)  # approximate px distance outside the brain edge
    rim = np.clip(np.minimum(d + 0.5, RIM_WIDTH - d + 0.5), 0.0, 1.0)

    if spec.occlusion:
        phi_half = _territory_direction(spec, rng)
        terr_poly = spec.territory if spec.territory is not None else default_territory(spec, phi_half)
        territory = rasterize_polygon(terr_poly, shape) & mask
        apex = terr_poly[0]
    else:
        phi_half = None
        territory = np.zeros(shape, dtype=bool)
        apex = (cx, cy)
    vessels = spec.vessels if spec.vessels is not None else default_vessels(spec, rng, phi_half)
    v = render_vessels(vessels, shape) * mask
    if territory.any():
        dist = ndimage.distance_transform_edt(~territory)
        v = v * (dist >= spec.vessel_margin_px)
    reperfused = _reperfused_part(territory, apex, spec.reperfused_fraction)

    def tissue(perfused):
        return np.clip(ndimage.gaussian_filter(perfused.astype(float), TISSUE_BLUR), 0, 1) * mask

    sinus_x = cx
    sinus = ((np.abs(np.arange(spec.width)[None, :] - sinus_x) <= 3)
             & (np.arange(spec.height)[:, None] < cy - 0.55 * ay)) & mask
    return _Layers(
        rim=rim * RIM_DARKNESS,
        vessels_pre=v, vessels_post=v,
        tissue_pre=tissue(mask & ~territory),
        tissue_post=tissue((mask & ~territory) | reperfused),
        sinus=sinus.astype(float),
        mask=mask, territory=territory, reperfused=reperfused,
    )


def _jitter_transform(spec, rng):
    j = spec.jitter_px
    center = ((spec.width - 1) / 2.0, (spec.height - 1) / 2.0)
    if j == 0:
        return AffineTransform2D.identity(center)
    r = j * math.sqrt(rng.uniform(0, 1))
    a = rng.uniform(0, 2 * math.pi)
    angle = rng.uniform(-1.0, 1.0) * min(2.0, 0.2 * j)
    return AffineTransform2D.similarity(angle, 1.0, (r * math.cos(a), r * math.sin(a)), center)


def render_frame(layers, curve, stage, jitter=None, noise=0.0, rng=None):
    vessel_d, tissue_d, sinus_d = curve
    post = Stage(stage) is Stage.POST
    vessels = layers.vessels_post if post else layers.vessels_pre
    tissue = layers.tissue_post if post else layers.tissue_pre
    dark = layers.rim + vessel_d * vessels + tissue_d * tissue + sinus_d * layers.sinus
    img = np.clip(1.0 - dark, 0.0, 1.0)
    if jitter is not None:
        img = warp_array(img, jitter.inverse())
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def _render_stage(spec, layers, stage, rng):
    curves = time_curves(spec.phase_plan)
    frames, jitters = [], []
    for i, curve in enumerate(curves):
        jt = _jitter_transform(spec, rng)
        frames.append(Frame(render_frame(layers, curve, stage, jt, spec.noise_sigma, rng),
                            i * spec.frame_interval_s))
        jitters.append(jt)
    acq = Acquisition(tuple(frames), View(spec.view), Stage(stage), spec.patient_id)
    return acq, tuple(jitters)


def generate(spec):
    """Render a pre/post pair for one view."""
    rng = np.random.default_rng(spec.rng_seed)
    layers = build_layers(spec, rng)
    pre, jit_pre = _render_stage(spec, layers, Stage.PRE, rng)
    post, jit_post = _render_stage(spec, layers, Stage.POST, rng)
    labels = phase_labels(spec.phase_plan)
    return PhantomCase(pre, post, labels.copy(), labels.copy(), BrainMask(layers.mask),
                       layers.territory, layers.reperfused, spec.reperfused_fraction,
                       jit_pre, jit_post)


def generate_patient(spec, views=("AP", "lateral")):
    """One case per view; each view gets its own seed-derived geometry."""
    out = {}
    for k, view in enumerate(views):
        out[View(view)] = generate(replace(spec, view=View(view).value, rng_seed=spec.rng_seed * 7919 + k))
    return out


def make_atlas(seed=0, width=128, height=128, view="AP"):
    """A stroke-free MINIP-like image with its brain mask."""
    rng = np.random.default_rng(10_000 + seed)
    spec = PhantomSpec(
        width=width, height=height, view=view, occlusion=False, jitter_px=0.0, noise_sigma=0.0,
        rng_seed=10_000 + seed,
        brain_axes=(0.40 * rng.uniform(0.95, 1.05), 0.38 * rng.uniform(0.95, 1.05)),
        brain_offset=(rng.uniform(-3, 3), rng.uniform(-3, 3)),
    )
    layers = build_layers(spec, np.random.default_rng(spec.rng_seed))
    curves = time_curves(spec.phase_plan)
    kept = phase_labels(spec.phase_plan)
    stack = [render_frame(layers, c, Stage.POST) for c, lab in zip(curves, kept)
             if lab in (PhaseLabel.ARTERIAL, PhaseLabel.PARENCHYMAL)]
    return Frame(np.min(stack, axis=0)), BrainMask(layers.mask)


def make_atlases(n=3, width=128, height=128, view="AP"):
    return [make_atlas(i, width, height, view) for i in range(n)]


def vessel_image(size=256, seed=0, noise=0.0):
    """Smooth single image with vessels, blush and rim, for registration tests."""
    spec = PhantomSpec(width=size, height=size, rng_seed=seed, jitter_px=0.0, noise_sigma=0.0,
                       reperfused_fraction=0.0, vessel_margin_px=12.0 * size / 128)
    rng = np.random.default_rng(seed)
    layers = build_layers(spec, rng)
    img = render_frame(layers, (0.7, 0.45, 0.0), Stage.PRE)
    img = ndimage.gaussian_filter(img, 1.0)
    if noise > 0:
        img = img + rng.normal(0, noise, img.shape)
    return Frame(np.clip(img, 0.0, 1.0))


def random_spec(rng, **overrides):
    """A randomized spec for training corpora."""
    plan = (int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(3, 7)), int(rng.integers(2, 5)))
    params = dict(
        phase_plan=plan,
        reperfused_fraction=float(rng.uniform(0, 1)),
        jitter_px=float(rng.uniform(0, 3)),
        noise_sigma=float(rng.uniform(0.005, 0.03)),
        rng_seed=int(rng.integers(2**31)),
        view=str(rng.choice(["AP", "lateral"])),
        brain_axes=(0.40 * float(rng.uniform(0.9, 1.1)), 0.38 * float(rng.uniform(0.9, 1.1))),
    )
    params.update(overrides)
    return PhantomSpec(**params)


def corpus(n, seed=0, **overrides):
    """``n`` labelled acquisitions, alternating pre and post stages."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        case = generate(random_spec(rng, **overrides))
        if i % 2 == 0:
            out.append((case.pre, case.labels_pre))
        else:
            out.append((case.post, case.labels_post))
    return out
