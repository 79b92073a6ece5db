"""Recursive zoom-in matching, filtering, tiling, and densification.

A match starts on the whole images stretched to the model input, then
repeatedly crops squares around the current estimate (halving the side each
step by default), re-resizes, and re-queries the same network, so the
answer sharpens as the crop approaches the model's native receptive
resolution. Crop sides in the second image are scaled by the co-visibility
ratio measured once at the coarsest level, which compensates global scale
differences between the views.

Bad matches are discarded, never repaired: a correspondence whose
forward-backward cycle misses the query by more than tau_cycle (quoted at a
256-px reference edge), or whose per-step estimates oscillate by more than
tau_std of the long edge, is rejected with a reason. Accepted sparse
matches can be densified to a flow field by barycentric interpolation over
their Delaunay triangulation, exact for affine motion.

The matcher callable is the only model dependency:
``matcher(queries_norm, crop_a, crop_b, window_a, window_b) -> (Q, 2)``.
Windows are None at the coarse full-image step; tests drive the engine with
ground-truth oracles through the same interface.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .flowio import FlowField
from .sampling import crop_resample, resize_image

__all__ = [
    "CropWindow",
    "ZoomSchedule",
    "InferenceConfig",
    "MatchEstimate",
    "CovisibilityResult",
    "NoCovisibilityError",
    "DensificationError",
    "estimate_covisibility_and_scale",
    "refine_recursive",
    "match_sparse",
    "densify_delaunay",
    "tile_initial_estimates",
    "dense_flow",
    "estimates_to_records",
]

REFERENCE_EDGE = 256  # resolution at which pixel thresholds are quoted


class NoCovisibilityError(ValueError):
    """The cycle filter found no mutually visible content at all."""


class DensificationError(ValueError):
    """Too few or degenerate matches to triangulate."""


@dataclass(frozen=True)
class CropWindow:
    """Square pixel window; maps crop-normalized [0,1]^2 to image pixels."""

    origin_x: float
    origin_y: float
    side: float
    image_w: int
    image_h: int

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError(f"window side {self.side} must be positive")

    @classmethod
    def centered(cls, center_xy, side, image_w, image_h):
        return cls(origin_x=float(center_xy[0]) - side / 2.0,
                   origin_y=float(center_xy[1]) - side / 2.0,
                   side=float(side), image_w=image_w, image_h=image_h)

    def to_pixels(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        return np.stack([self.origin_x + self.side * uv[..., 0],
                         self.origin_y + self.side * uv[..., 1]], axis=-1)

    def to_norm(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return np.stack([(xy[..., 0] - self.origin_x) / self.side,
                         (xy[..., 1] - self.origin_y) / self.side], axis=-1)

    def extract(self, img, out_size):
        return crop_resample(img, np.array([self.origin_x, self.origin_y]),
                             self.side, out_size).astype(np.float32)


@dataclass(frozen=True)
class ZoomSchedule:
    factor: float = 2.0
    steps: int = 4

    def __post_init__(self):
        if self.factor <= 1.0:
            raise ValueError(f"zoom factor {self.factor} must exceed 1")
        if self.steps < 0:
            raise ValueError(f"steps {self.steps} must be >= 0")


@dataclass(frozen=True)
class InferenceConfig:
    """Engine knobs; pixel thresholds are quoted at a 256-px long edge."""

    model_size: int = 128
    tau_visible: float = 5.0
    tau_cycle: float = 5.0
    tau_std: float = 0.02
    covis_grid: int = 32
    zoom: ZoomSchedule = field(default_factory=ZoomSchedule)
    side_from_area: bool = True   # sqrt of valid-count ratio vs raw ratio

    def with_zoom(self, factor=None, steps=None):
        z = ZoomSchedule(factor=factor if factor is not None else self.zoom.factor,
                         steps=steps if steps is not None else self.zoom.steps)
        return replace(self, zoom=z)


@dataclass
class CovisibilityResult:
    valid_a: np.ndarray
    valid_b: np.ndarray
    count_a: int
    count_b: int
    side_scale_ratio: float


@dataclass
class MatchEstimate:
    """One query's refinement outcome; per_step in image-two pixels."""

    query: np.ndarray
    per_step: list
    cycle_error: float
    accepted: bool
    rejection_reason: str = "none"

    @property
    def target(self):
        return self.per_step[-1] if self.per_step else None


def _grid_points(g):
    u = (np.arange(g) + 0.5) / g
    gx, gy = np.meshgrid(u, u)
    return np.stack([gx, gy], axis=-1).reshape(-1, 2)


def _full_window(img):
    """Whole-image window when the image is square; None means 'stretched'."""
    h, w = img.shape[:2]
    if h == w:
        return CropWindow(origin_x=0.0, origin_y=0.0, side=float(w),
                          image_w=w, image_h=h)
    return None


def _cycle_errors(queries, img_x, img_y, win_x, win_y, matcher):
    fwd = matcher(queries, img_x, img_y, win_x, win_y)
    back = matcher(np.asarray(fwd, dtype=np.float32), img_y, img_x, win_y, win_x)
    return np.linalg.norm(np.asarray(back) - queries, axis=-1)


def estimate_covisibility_and_scale(img_a, img_b, matcher, icfg=InferenceConfig()):
    """Mask mutually visible content and derive the crop-side scale ratio.

    Cycle errors on a coarse grid over each (stretched) image are
    thresholded at tau_visible scaled to the model input; the ratio of
    valid counts, area-to-side converted, balances crop sizes later.
    """
    s = icfg.model_size
    a_rs = resize_image(img_a, s).astype(np.float32)
    b_rs = resize_image(img_b, s).astype(np.float32)
    fw_a, fw_b = _full_window(img_a), _full_window(img_b)
    g = icfg.covis_grid
    pts = _grid_points(g).astype(np.float32)
    tau_norm = icfg.tau_visible / REFERENCE_EDGE  # == tau*s/256 in model px
    err_a = _cycle_errors(pts, a_rs, b_rs, fw_a, fw_b, matcher)
    err_b = _cycle_errors(pts, b_rs, a_rs, fw_b, fw_a, matcher)
    valid_a = (err_a <= tau_norm).reshape(g, g)
    valid_b = (err_b <= tau_norm).reshape(g, g)
    count_a = int(valid_a.sum())
    count_b = int(valid_b.sum())
    if count_a == 0 or count_b == 0:
        raise NoCovisibilityError(
            f"covisibility counts {count_a}/{count_b} on a {g}x{g} grid")
    ratio = count_b / count_a
    if icfg.side_from_area:
        ratio = math.sqrt(ratio)
    return CovisibilityResult(valid_a=valid_a, valid_b=valid_b,
                              count_a=count_a, count_b=count_b,
                              side_scale_ratio=float(ratio))


def _finite(p):
    return np.isfinite(np.asarray(p)).all()


def refine_recursive(query_px, img_a, img_b, matcher, icfg=InferenceConfig(),
                     covis=None, _resized=None):
    """Zoom-in refinement of one query; rejection is a labeled outcome.

    Step 0 matches the whole (stretched) images; step t crops squares of
    side long_edge / factor^t around the query (image one) and the running
    estimate (image two, side multiplied by the covisibility scale ratio),
    re-resizes to the model input and re-queries. The cycle check runs at
    the final state; the oscillation check looks at all per-step estimates.
    """
    h_a, w_a = img_a.shape[:2]
    h_b, w_b = img_b.shape[:2]
    long_a, long_b = float(max(w_a, h_a)), float(max(w_b, h_b))
    s = icfg.model_size
    if _resized is None:
        a_rs = resize_image(img_a, s).astype(np.float32)
        b_rs = resize_image(img_b, s).astype(np.float32)
    else:
        a_rs, b_rs = _resized
    if covis is None:
        covis = estimate_covisibility_and_scale(img_a, img_b, matcher, icfg)
    ratio = covis.side_scale_ratio

    fw_a, fw_b = _full_window(img_a), _full_window(img_b)
    query_px = np.asarray(query_px, dtype=np.float64)
    q_norm = np.array([query_px[0] / w_a, query_px[1] / h_a], dtype=np.float32)
    est_norm = matcher(q_norm[None], a_rs, b_rs, fw_a, fw_b)[0]
    est_px = np.array([est_norm[0] * w_b, est_norm[1] * h_b], dtype=np.float64)
    per_step = [est_px]
    win_a = win_b = None
    crop_a = crop_b = None

    for t in range(1, icfg.zoom.steps + 1):
        if not _finite(est_px):
            break
        side_a = long_a / icfg.zoom.factor ** t
        side_b = (long_b / icfg.zoom.factor ** t) * ratio
        win_a = CropWindow.centered(query_px, side_a, w_a, h_a)
        win_b = CropWindow.centered(est_px, side_b, w_b, h_b)
        crop_a = win_a.extract(img_a, s)
        crop_b = win_b.extract(img_b, s)
        qc = win_a.to_norm(query_px).astype(np.float32)
        est_c = matcher(qc[None], crop_a, crop_b, win_a, win_b)[0]
        est_px = win_b.to_pixels(est_c)
        per_step.append(est_px)

    if not _finite(per_step[-1]):
        return MatchEstimate(query=query_px, per_step=per_step,
                             cycle_error=float("inf"), accepted=False,
                             rejection_reason="cycle")

    # cycle check at the final refinement state
    if win_a is not None:
        est_c = win_b.to_norm(per_step[-1]).astype(np.float32)
        back_c = matcher(est_c[None], crop_b, crop_a, win_b, win_a)[0]
        back_px = win_a.to_pixels(back_c)
    else:
        est_c = np.array([per_step[-1][0] / w_b, per_step[-1][1] / h_b],
                         dtype=np.float32)
        back_c = matcher(est_c[None], b_rs, a_rs, fw_b, fw_a)[0]
        back_px = np.array([back_c[0] * w_a, back_c[1] * h_a])
    cycle_error = float(np.linalg.norm(back_px - query_px)) if _finite(back_px) \
        else float("inf")

    tau_cycle_px = icfg.tau_cycle * long_a / REFERENCE_EDGE
    steps_arr = np.asarray(per_step, dtype=np.float64)
    center = steps_arr.mean(axis=0)
    spread = float(np.sqrt(((steps_arr - center) ** 2).sum(axis=-1).mean()))
    oscillation = spread / long_b

    if cycle_error > tau_cycle_px:
        return MatchEstimate(query=query_px, per_step=per_step,
                             cycle_error=cycle_error, accepted=False,
                             rejection_reason="cycle")
    if oscillation > icfg.tau_std:
        return MatchEstimate(query=query_px, per_step=per_step,
                             cycle_error=cycle_error, accepted=False,
                             rejection_reason="oscillation")
    return MatchEstimate(query=query_px, per_step=per_step,
                         cycle_error=cycle_error, accepted=True)


def match_sparse(queries_px, img_a, img_b, matcher, icfg=InferenceConfig(),
                 threads=1):
    """Covisibility once, then per-query refinement, in input order.

    When no covisible content exists every query comes back rejected with
    reason "no_covisibility" instead of raising; callers decide severity.
    """
    queries_px = np.asarray(queries_px, dtype=np.float64).reshape(-1, 2)
    if len(queries_px) == 0:
        raise ValueError("no queries given")
    h_a, w_a = img_a.shape[:2]
    if (queries_px[:, 0].min() < 0 or queries_px[:, 0].max() > w_a
            or queries_px[:, 1].min() < 0 or queries_px[:, 1].max() > h_a):
        raise ValueError("query outside image one")
    s = icfg.model_size
    resized = (resize_image(img_a, s).astype(np.float32),
               resize_image(img_b, s).astype(np.float32))
    try:
        covis = estimate_covisibility_and_scale(img_a, img_b, matcher, icfg)
    except NoCovisibilityError:
        return [MatchEstimate(query=q, per_step=[], cycle_error=float("inf"),
                              accepted=False, rejection_reason="no_covisibility")
                for q in queries_px]

    def solve(q):
        return refine_recursive(q, img_a, img_b, matcher, icfg, covis=covis,
                                _resized=resized)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(solve, queries_px))
    return [solve(q) for q in queries_px]


def estimates_to_records(estimates):
    """Accepted estimates as (qx, qy, px, py, cycle_error) rows."""
    rows = [[e.query[0], e.query[1], e.target[0], e.target[1], e.cycle_error]
            for e in estimates if e.accepted]
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


# -- densification ---------------------------------------------------------------


def densify_delaunay(matches, width, height):
    """Barycentric interpolation of sparse displacements over their
    Delaunay triangulation; hull-exterior pixels are flagged invalid.

    ``matches`` is (N, 4): query x, y and target x, y in pixels. Pixels are
    sampled at their centers; a match sitting exactly on a center writes
    its displacement through unmodified.
    """
    arr = np.asarray(matches, dtype=np.float64).reshape(-1, 4)
    if len(arr) < 3:
        raise DensificationError(f"{len(arr)} matches; need at least 3")
    pts = arr[:, :2]
    disp = arr[:, 2:] - arr[:, :2]
    try:
        tri = Delaunay(pts)
    except QhullError as e:
        raise DensificationError(f"degenerate match layout: {e}") from None
    if tri.simplices.size == 0:
        raise DensificationError("triangulation is empty (collinear matches?)")

    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    samples = np.stack([gx, gy], axis=-1).reshape(-1, 2)
    simplex = tri.find_simplex(samples)
    inside = simplex >= 0

    flow = np.zeros((height * width, 2), dtype=np.float64)
    if inside.any():
        tri_pts = pts[tri.simplices[simplex[inside]]]      # (M, 3, 2)
        p0 = tri_pts[:, 0]
        e1 = tri_pts[:, 1] - p0
        e2 = tri_pts[:, 2] - p0
        rel = samples[inside] - p0
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        l1 = (rel[:, 0] * e2[:, 1] - rel[:, 1] * e2[:, 0]) / det
        l2 = (e1[:, 0] * rel[:, 1] - e1[:, 1] * rel[:, 0]) / det
        weights = np.stack([1.0 - l1 - l2, l1, l2], axis=-1)  # (M, 3)
        tri_disp = disp[tri.simplices[simplex[inside]]]       # (M, 3, 2)
        flow[inside] = (weights[..., None] * tri_disp).sum(axis=1)

    flow = flow.reshape(height, width, 2)
    valid = inside.reshape(height, width)
    on_center = np.isclose(pts - 0.5, np.round(pts - 0.5), atol=0.0)
    for k in np.flatnonzero(on_center.all(axis=1)):
        j, i = int(pts[k, 0] - 0.5), int(pts[k, 1] - 0.5)
        if 0 <= i < height and 0 <= j < width:
            flow[i, j] = disp[k]
            valid[i, j] = True
    return FlowField(width=width, height=height,
                     flow=flow.astype(np.float32), valid=valid)


# -- tiling for wide images ---------------------------------------------------------


def tile_initial_estimates(img_a, img_b, matcher, queries_px,
                           icfg=InferenceConfig()):
    """Coarse estimates for non-square first images via square tiling.

    The short edge defines the tile side; tiles cover the long edge with
    even overlap. Every query is answered by each covering tile against the
    whole stretched second image, and overlaps resolve to the estimate with
    the best cycle consistency. Portrait images run transposed.

    Returns (estimates_px (Q,2), cycle_err_px (Q,), n_tiles).
    """
    queries_px = np.asarray(queries_px, dtype=np.float64).reshape(-1, 2)
    h, w = img_a.shape[:2]
    if h > w:
        est_t, err, n = tile_initial_estimates(
            np.transpose(img_a, (1, 0, 2)), np.transpose(img_b, (1, 0, 2)),
            _transpose_matcher(matcher), queries_px[:, ::-1], icfg)
        return est_t[:, ::-1], err, n

    s = icfg.model_size
    side = float(h)
    n_tiles = max(1, math.ceil(w / side - 1e-9))
    if n_tiles == 1:
        offsets = [0.0]
    else:
        offsets = list(np.linspace(0.0, w - side, n_tiles))
    b_rs = resize_image(img_b, s).astype(np.float32)
    fw_b = _full_window(img_b)
    h_b, w_b = img_b.shape[:2]

    best_est = np.full((len(queries_px), 2), np.nan)
    best_err = np.full(len(queries_px), np.inf)
    for x0 in offsets:
        win = CropWindow(origin_x=x0, origin_y=0.0, side=side, image_w=w, image_h=h)
        covered = np.flatnonzero((queries_px[:, 0] >= x0 - 1e-9)
                                 & (queries_px[:, 0] <= x0 + side + 1e-9))
        if covered.size == 0:
            continue
        tile = win.extract(img_a, s)
        qn = win.to_norm(queries_px[covered]).astype(np.float32)
        est_n = np.asarray(matcher(qn, tile, b_rs, win, fw_b), dtype=np.float64)
        est_px = est_n * np.array([w_b, h_b])
        back_n = np.asarray(matcher(est_n.astype(np.float32), b_rs, tile,
                                    fw_b, win), dtype=np.float64)
        back_px = win.to_pixels(back_n)
        err = np.linalg.norm(back_px - queries_px[covered], axis=-1)
        better = err < best_err[covered]
        idx = covered[better]
        best_est[idx] = est_px[better]
        best_err[idx] = err[better]
    return best_est, best_err, n_tiles


def _transpose_window(win):
    if win is None:
        return None
    return CropWindow(origin_x=win.origin_y, origin_y=win.origin_x,
                      side=win.side, image_w=win.image_h, image_h=win.image_w)


def _transpose_matcher(matcher):
    def swapped(queries, img_x, img_y, win_x=None, win_y=None):
        q = np.asarray(queries)[:, ::-1].copy()
        out = np.asarray(matcher(q, np.transpose(img_x, (1, 0, 2)),
                                 np.transpose(img_y, (1, 0, 2)),
                                 _transpose_window(win_x),
                                 _transpose_window(win_y)))
        return out[:, ::-1]
    return swapped


# -- dense output -------------------------------------------------------------------


def dense_flow(img_a, img_b, matcher, icfg=InferenceConfig(), grid=24,
               mode="interp", threads=1):
    """Dense displacement field for image one.

    mode="interp": match a grid of queries through the zoom pipeline and
    densify the accepted ones (the default). mode="all": push every pixel
    center through the full pipeline; exact but slow, provided for scale
    experiments on small images.
    """
    h, w = img_a.shape[:2]
    if mode == "all":
        xs = np.arange(w) + 0.5
        ys = np.arange(h) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        queries = np.stack([gx, gy], axis=-1).reshape(-1, 2)
    elif mode == "interp":
        u = (np.arange(grid) + 0.5) / grid
        gx, gy = np.meshgrid(u * w, u * h)
        queries = np.stack([gx, gy], axis=-1).reshape(-1, 2)
    else:
        raise ValueError(f"unknown dense mode {mode!r}")
    estimates = match_sparse(queries, img_a, img_b, matcher, icfg, threads=threads)
    if mode == "all":
        flow = np.zeros((h, w, 2), dtype=np.float32)
        valid = np.zeros((h, w), dtype=bool)
        for e in estimates:
            j = int(e.query[0] - 0.5)
            i = int(e.query[1] - 0.5)
            if e.accepted:
                flow[i, j] = e.target - e.query
                valid[i, j] = True
        return FlowField(width=w, height=h, flow=flow, valid=valid)
    records = estimates_to_records(estimates)
    if len(records) < 3:
        raise DensificationError(f"only {len(records)} accepted matches")
    return densify_delaunay(records[:, :4], w, h)
