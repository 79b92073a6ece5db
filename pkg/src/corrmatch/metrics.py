"""Flow-error metrics over jointly valid pixels."""

from __future__ import annotations

import numpy as np

__all__ = ["aepe", "pck", "fl_ratio", "MetricError", "EmptyValidSetError"]


class MetricError(ValueError):
    pass


class EmptyValidSetError(MetricError):
    pass


def _joint_errors(pred, gt):
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise MetricError(f"size mismatch: {pred.width}x{pred.height} vs "
                          f"{gt.width}x{gt.height}")
    mask = pred.valid & gt.valid
    if not mask.any():
        raise EmptyValidSetError("no pixel is valid in both fields")
    diff = pred.flow[mask].astype(np.float64) - gt.flow[mask].astype(np.float64)
    return np.sqrt((diff ** 2).sum(axis=-1)), mask


def aepe(pred, gt):
    """Mean end-point error in pixels over jointly valid pixels."""
    epe, _ = _joint_errors(pred, gt)
    return float(epe.mean())


def pck(pred, gt, threshold_px):
    """Fraction of jointly valid pixels with end-point error <= threshold."""
    if threshold_px < 0:
        raise MetricError(f"negative threshold {threshold_px}")
    epe, _ = _joint_errors(pred, gt)
    return float((epe <= threshold_px).mean())


def fl_ratio(pred, gt, magnitude_relative=True):
    """Fraction of flow outliers over jointly valid pixels.

    The default rule is the community one: an outlier errs by more than
    3 px AND more than 5% of the true flow magnitude. With
    ``magnitude_relative=False`` the second clause is dropped.
    """
    epe, mask = _joint_errors(pred, gt)
    out = epe > 3.0
    if magnitude_relative:
        mag = np.sqrt((gt.flow[mask].astype(np.float64) ** 2).sum(axis=-1))
        out &= epe > 0.05 * mag
    return float(out.mean())
