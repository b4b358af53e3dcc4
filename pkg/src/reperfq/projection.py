"""Minimum-intensity projection over a frame stack."""
import numpy as np

from .core import Frame
from .errors import DimensionMismatch, EmptyInput


def minip(frames):
    """Per-pixel minimum over ``frames``; the result carries no time stamp."""
    frames = list(frames.frames if hasattr(frames, "frames") else frames)
    if not frames:
        raise EmptyInput("minimum-intensity projection needs at least one frame")
    shape = frames[0].shape
    out = np.array(frames[0].pixels, copy=True)
    for f in frames[1:]:
        if f.shape != shape:
            raise DimensionMismatch(f"frame shape {f.shape} differs from {shape}")
        np.minimum(out, f.pixels, out=out)
    return Frame(out)
