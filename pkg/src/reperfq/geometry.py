"""Resampling of images and label maps under planar affine transforms."""
import numpy as np

from .core import AffineTransform2D, Frame

FILL = 1.0


def _grid(shape):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def map_points(t: AffineTransform2D, xs, ys):
    dx = xs - t.cx
    dy = ys - t.cy
    mx = t.a11 * dx + t.a12 * dy + t.cx + t.tx
    my = t.a21 * dx + t.a22 * dy + t.cy + t.ty
    return mx, my


def bilinear(image, xs, ys, fill=FILL):
    """Sample ``image`` at real ``(x, y)`` positions.

    Points outside ``[0, w-1] x [0, h-1]`` get ``fill``. Returns
    ``(values, inside)``.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    inside = (xs >= 0.0) & (xs <= w - 1) & (ys >= 0.0) & (ys <= h - 1)
    x = np.where(inside, xs, 0.0)
    y = np.where(inside, ys, 0.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
    fx = x - x0
    fy = y - y0
    v = ((1 - fy) * ((1 - fx) * image[y0, x0] + fx * image[y0, x0 + 1])
         + fy * ((1 - fx) * image[y0 + 1, x0] + fx * image[y0 + 1, x0 + 1]))
    return np.where(inside, v, fill), inside


def warp_array(image, t: AffineTransform2D, fill=FILL):
    """Output pixel ``p`` takes the bilinear value of ``image`` at ``t(p)``."""
    image = np.asarray(image, dtype=np.float64)
    xs, ys = _grid(image.shape)
    mx, my = map_points(t, xs, ys)
    out, _ = bilinear(image, mx, my, fill)
    return out


def warp(frame: Frame, t: AffineTransform2D):
    """Resample a frame at ``t``-mapped coordinates; out-of-bounds become 1.0."""
    return Frame(np.clip(warp_array(frame.pixels, t), 0.0, 1.0), frame.time_s)


def warp_nearest(values, t: AffineTransform2D, fill):
    """Nearest-neighbour resampling, for label maps and masks."""
    values = np.asarray(values)
    h, w = values.shape
    xs, ys = _grid(values.shape)
    mx, my = map_points(t, xs, ys)
    ix = np.floor(mx + 0.5).astype(np.intp)
    iy = np.floor(my + 0.5).astype(np.intp)
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.full(values.shape, fill, dtype=values.dtype)
    out[inside] = values[iy[inside], ix[inside]]
    return out
