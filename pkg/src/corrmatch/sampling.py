"""Bilinear image sampling shared by the data generator and the inference crops.

Pixel (i, j) covers the unit cell [j, j+1) x [i, i+1) and carries its value
at the center (j + 0.5, i + 0.5). Sample positions between centers
interpolate bilinearly; contributions from outside the pixel grid are zero,
which is what keeps zoom crops that overrun the image border well defined.
Sampling an image at exactly its own pixel centers reproduces it bit for bit.
"""

from __future__ import annotations

import numpy as np

__all__ = ["bilinear_sample", "crop_resample", "resize_image"]


def bilinear_sample(img, xs, ys):
    """Sample img (H,W,C) at continuous pixel coordinates; zeros outside."""
    h, w = img.shape[:2]
    gx = np.asarray(xs, dtype=np.float64) - 0.5
    gy = np.asarray(ys, dtype=np.float64) - 0.5
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = (gx - x0).astype(img.dtype)
    fy = (gy - y0).astype(img.dtype)

    def gather(yi, xi):
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        flat = img.reshape(h * w, -1)
        idx = np.where(inside, yi * w + xi, 0)
        vals = flat[idx]
        return vals * inside[..., None].astype(img.dtype)

    fx = fx[..., None]
    fy = fy[..., None]
    out = (gather(y0, x0) * (1 - fx) * (1 - fy)
           + gather(y0, x0 + 1) * fx * (1 - fy)
           + gather(y0 + 1, x0) * (1 - fx) * fy
           + gather(y0 + 1, x0 + 1) * fx * fy)
    if img.ndim == 2:
        return out[..., 0]
    return out


def crop_resample(img, origin_xy, side_xy, out_size):
    """Resample a rectangle of ``img`` to (out_size, out_size, C).

    ``origin_xy`` and ``side_xy`` are in source pixels; side may differ per
    axis (full-image stretch is the rectangular special case). Output pixel
    (i, j) samples the source at origin + side * ((j+.5)/S, (i+.5)/S).
    """
    side_xy = np.broadcast_to(np.asarray(side_xy, dtype=np.float64), (2,))
    s = out_size
    u = (np.arange(s, dtype=np.float64) + 0.5) / s
    xs = origin_xy[0] + side_xy[0] * u[None, :]
    ys = origin_xy[1] + side_xy[1] * u[:, None]
    return bilinear_sample(img, np.broadcast_to(xs, (s, s)),
                           np.broadcast_to(ys, (s, s)))


def resize_image(img, out_size):
    """Stretch the whole image to a square (out_size, out_size, C)."""
    h, w = img.shape[:2]
    return crop_resample(img, np.zeros(2), np.array([w, h], dtype=np.float64),
                         out_size)
