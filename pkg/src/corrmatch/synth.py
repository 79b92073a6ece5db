"""Procedural image pairs with exact, analytic ground-truth correspondence.

A scene is a stack of layers; each layer owns an analytic texture (random
low-frequency color waves plus gaussian blobs, defined on the whole plane)
and a 3x3 homography describing how its content moves between the two
views. The first view renders every layer in place; the second renders each
layer warped by its motion, later layers occluding earlier ones, plus a
brightness/contrast jitter. Because textures are closed-form and motions
are projective, the true correspondence of any point is known exactly and
visibility is decidable without rasterization.

The crop sampler mirrors the training protocol: pick a visible anchor
point, pick one of ten zoom levels log-spaced over [1, 10], cut a square
around the anchor in view one and a square around its true partner in view
two (scaled by the local magnification of the motion), then keep the pair
only if 100 cross-visible correspondences can be drawn.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .sampling import crop_resample

__all__ = [
    "SceneOptions",
    "LayerSpec",
    "SceneSpec",
    "GroundTruthMap",
    "RenderedPair",
    "TrainSample",
    "ZOOM_LEVELS",
    "homography_from_corners",
    "apply_homography",
    "local_scale",
    "sample_scene_spec",
    "render_pair",
    "ground_truth_flow",
    "sample_training_crop",
    "scene_options_to_text",
    "scene_options_from_text",
]

ZOOM_LEVELS = 10.0 ** (np.arange(10) / 9.0)

UNIT_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


class DegenerateHomographyError(ValueError):
    """Scene construction produced a near-singular motion."""


# -- homography helpers -------------------------------------------------------


def homography_from_corners(src, dst):
    """Direct linear transform from four point pairs; h22 fixed to 1."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rhs.append(u)
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.append(v)
    try:
        sol = np.linalg.solve(np.array(rows), np.array(rhs))
    except np.linalg.LinAlgError as e:
        raise DegenerateHomographyError(str(e)) from None
    h = np.append(sol, 1.0).reshape(3, 3)
    if abs(np.linalg.det(h)) < 1e-8:
        raise DegenerateHomographyError(f"det {np.linalg.det(h):.3e}")
    return h


def apply_homography(h, pts):
    """Projective action on (..., 2) points."""
    pts = np.asarray(pts, dtype=np.float64)
    x, y = pts[..., 0], pts[..., 1]
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    u = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w
    v = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w
    return np.stack([u, v], axis=-1)


def local_scale(h, pt):
    """sqrt(|det J|) of the projective map at pt: isotropic magnification."""
    x, y = float(pt[0]), float(pt[1])
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    u = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w
    v = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w
    j = np.array([
        [h[0, 0] - u * h[2, 0], h[0, 1] - u * h[2, 1]],
        [h[1, 0] - v * h[2, 0], h[1, 1] - v * h[2, 1]],
    ]) / w
    return float(np.sqrt(abs(np.linalg.det(j))))


# -- scene specification -------------------------------------------------------


@dataclass(frozen=True)
class SceneOptions:
    """Generator knobs; together with a seed they pin a scene bit-exactly."""

    n_layers: int = 1
    corner_jitter: float = 0.06
    translation: float = 0.10
    fg_translation: float = 0.16
    photometric: float = 0.08
    n_waves: int = 10
    n_blobs: int = 6
    max_freq: float = 9.0


@dataclass(frozen=True)
class LayerSpec:
    """One textured plane: region in view one, motion into view two."""

    motion: np.ndarray                 # 3x3, invertible
    region: np.ndarray | None          # (V,2) convex CCW polygon; None = whole plane
    wave_freq: np.ndarray              # (W,2) cycles per unit square
    wave_phase: np.ndarray             # (W,)
    wave_amp: np.ndarray               # (W,3)
    blob_center: np.ndarray            # (B,2)
    blob_sigma: np.ndarray             # (B,)
    blob_amp: np.ndarray               # (B,3)

    def texture(self, pts):
        """Analytic RGB texture at (...,2) points; clipped to [0,1] later."""
        p = np.asarray(pts, dtype=np.float64)
        phase = 2.0 * np.pi * (p @ self.wave_freq.T) + self.wave_phase
        color = 0.5 + np.sin(phase) @ self.wave_amp
        d2 = ((p[..., None, :] - self.blob_center) ** 2).sum(-1)
        color = color + np.exp(-0.5 * d2 / self.blob_sigma ** 2) @ self.blob_amp
        return color

    def contains(self, pts):
        if self.region is None:
            return np.ones(np.asarray(pts).shape[:-1], dtype=bool)
        p = np.asarray(pts, dtype=np.float64)
        verts = self.region
        nxt = np.roll(verts, -1, axis=0)
        edge = nxt - verts                                      # (V,2)
        rel = p[..., None, :] - verts                           # (...,V,2)
        cross = edge[:, 0] * rel[..., 1] - edge[:, 1] * rel[..., 0]
        return (cross >= 0).all(axis=-1)


@dataclass(frozen=True)
class SceneSpec:
    """Fully realized scene; later layers sit in front of earlier ones."""

    seed: int
    layers: tuple
    brightness: float
    contrast: float

    def with_motions(self, motions):
        """Same textures and regions under different layer motions."""
        new = tuple(replace(l, motion=np.asarray(m, dtype=np.float64))
                    for l, m in zip(self.layers, motions))
        for l in new:
            if abs(np.linalg.det(l.motion)) < 1e-8:
                raise DegenerateHomographyError("replacement motion is singular")
        return replace(self, layers=new)


def _random_homography(rng, corner_jitter, translation):
    for _ in range(20):
        t = rng.uniform(-translation, translation, size=2)
        dst = UNIT_CORNERS + rng.uniform(-corner_jitter, corner_jitter,
                                         size=(4, 2)) + t
        try:
            return homography_from_corners(UNIT_CORNERS, dst)
        except DegenerateHomographyError:
            continue
    raise DegenerateHomographyError("could not draw an invertible motion")


def _random_layer(rng, options, motion, region):
    w = options.n_waves
    b = options.n_blobs
    freq = rng.uniform(-options.max_freq, options.max_freq, size=(w, 2))
    phase = rng.uniform(0, 2 * np.pi, size=w)
    amp = rng.uniform(0.02, 0.30, size=(w, 3)) / np.sqrt(w)
    centers = rng.uniform(-0.1, 1.1, size=(b, 2))
    sigma = rng.uniform(0.02, 0.10, size=b)
    blob_amp = rng.uniform(-0.45, 0.45, size=(b, 3))
    return LayerSpec(motion=motion, region=region, wave_freq=freq,
                     wave_phase=phase, wave_amp=amp, blob_center=centers,
                     blob_sigma=sigma, blob_amp=blob_amp)


def _random_polygon(rng):
    center = rng.uniform(0.28, 0.72, size=2)
    rx, ry = rng.uniform(0.14, 0.30, size=2)
    theta = rng.uniform(0, np.pi)
    k = int(rng.integers(5, 8))
    ang = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    pts = np.stack([rx * np.cos(ang), ry * np.sin(ang)], axis=-1)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    return center + pts @ rot.T


def sample_scene_spec(seed, options=SceneOptions()):
    """Realize every texture/motion table from one seed; bit-reproducible."""
    rng = np.random.default_rng(seed)
    layers = [_random_layer(rng, options,
                            _random_homography(rng, options.corner_jitter,
                                               options.translation),
                            region=None)]
    for _ in range(options.n_layers - 1):
        motion = _random_homography(rng, options.corner_jitter,
                                    options.fg_translation)
        layers.append(_random_layer(rng, options, motion, _random_polygon(rng)))
    brightness = float(rng.uniform(-options.photometric, options.photometric))
    contrast = float(1.0 + rng.uniform(-options.photometric, options.photometric))
    return SceneSpec(seed=seed, layers=tuple(layers),
                     brightness=brightness, contrast=contrast)


# -- ground truth --------------------------------------------------------------


class GroundTruthMap:
    """Exact correspondence and visibility for one scene."""

    def __init__(self, spec):
        self.spec = spec
        self.layers = spec.layers
        self._inverses = [np.linalg.inv(l.motion) for l in self.layers]

    def layer_index(self, pts):
        """Frontmost layer owning each point in view one."""
        pts = np.asarray(pts, dtype=np.float64)
        idx = np.zeros(pts.shape[:-1], dtype=np.int64)
        for i, layer in enumerate(self.layers[1:], start=1):
            idx = np.where(layer.contains(pts), i, idx)
        return idx

    def map_points(self, pts):
        """(targets, visible) for (...,2) points in view one.

        A point is visible when its image lands inside the unit square and
        no layer in front of its own covers that location in view two.
        """
        pts = np.asarray(pts, dtype=np.float64)
        own = self.layer_index(pts)
        targets = np.zeros_like(pts)
        for i, layer in enumerate(self.layers):
            mask = own == i
            if mask.any():
                targets[mask] = apply_homography(layer.motion, pts[mask])
        inside = ((targets >= 0.0) & (targets <= 1.0)).all(axis=-1)
        occluder = np.full(pts.shape[:-1], -1, dtype=np.int64)
        for i, (layer, inv) in enumerate(zip(self.layers, self._inverses)):
            back = apply_homography(inv, targets)
            occluder = np.where(layer.contains(back), i, occluder)
        visible = inside & (occluder == own)
        return targets, visible

    def flow_field_arrays(self, size):
        """Dense pixel flow at pixel centers plus the visibility mask."""
        u = (np.arange(size) + 0.5) / size
        gx, gy = np.meshgrid(u, u)
        pts = np.stack([gx, gy], axis=-1)
        targets, visible = self.map_points(pts)
        flow = (targets - pts) * size
        return flow.astype(np.float32), visible


def ground_truth_flow(gt, size):
    from .flowio import FlowField
    flow, visible = gt.flow_field_arrays(size)
    return FlowField(width=size, height=size, flow=flow, valid=visible)


# -- rendering -----------------------------------------------------------------


@dataclass(frozen=True)
class RenderedPair:
    spec: SceneSpec
    image_a: np.ndarray
    image_b: np.ndarray
    gt: GroundTruthMap


def render_pair(spec, size):
    """Render both views at size x size; exact ground truth attached."""
    if size < 64:
        raise ValueError(f"render size {size} too small to carry texture")
    gt = GroundTruthMap(spec)
    u = (np.arange(size) + 0.5) / size
    gx, gy = np.meshgrid(u, u)
    pts = np.stack([gx, gy], axis=-1)

    own = gt.layer_index(pts)
    img_a = np.zeros((size, size, 3))
    for i, layer in enumerate(spec.layers):
        mask = own == i
        if mask.any():
            img_a[mask] = layer.texture(pts[mask])

    img_b = np.zeros((size, size, 3))
    claimed = np.full((size, size), -1, dtype=np.int64)
    for i, (layer, inv) in enumerate(zip(spec.layers, gt._inverses)):
        back = apply_homography(inv, pts)
        mask = layer.contains(back)
        if mask.any():
            img_b[mask] = layer.texture(back[mask])
            claimed[mask] = i
    img_b = spec.contrast * (img_b - 0.5) + 0.5 + spec.brightness

    img_a = np.clip(img_a, 0.0, 1.0).astype(np.float32)
    img_b = np.clip(img_b, 0.0, 1.0).astype(np.float32)
    return RenderedPair(spec=spec, image_a=img_a, image_b=img_b, gt=gt)


# -- training crops ------------------------------------------------------------


@dataclass(frozen=True)
class TrainSample:
    """One optimization unit: two crops plus 100 exact correspondences.

    Windows are (origin, side) in normalized coordinates of the source
    images; the anchor is the sampled query the first crop is centered on.
    """

    crop_a: np.ndarray
    crop_b: np.ndarray
    queries: np.ndarray        # (n, 2) in crop_a-normalized coordinates
    targets: np.ndarray        # (n, 2) in crop_b-normalized coordinates
    zoom_level: float
    window_a: tuple            # (origin_xy (2,), side)
    window_b: tuple
    anchor: np.ndarray


def _window_for(center, side):
    if side >= 1.0:
        return np.zeros(2), 1.0
    origin = np.clip(center - side / 2.0, 0.0, 1.0 - side)
    return origin, side


def sample_training_crop(pair, rng, model_size, zoom=None, n_corr=100,
                         max_draws=4000, center_tries=20):
    """Draw one TrainSample or return None when the pair must be skipped.

    ``zoom=None`` draws one of the ten log-spaced levels; ``zoom=1`` is the
    whole-image regime of the early training stages. The first crop is
    strictly centered on the anchor; the second is centered on the anchor's
    true partner (shifted only to stay inside the frame) with its side
    scaled by the local magnification of the anchor's layer motion.
    """
    gt = pair.gt
    z = float(rng.choice(ZOOM_LEVELS)) if zoom is None else float(zoom)
    side_a = 1.0 / z

    anchor = target = None
    layer = 0
    for _ in range(center_tries):
        cand = rng.uniform(0.0, 1.0, size=2)
        if side_a < 1.0:
            lo, hi = side_a / 2.0, 1.0 - side_a / 2.0
            cand = lo + cand * (hi - lo)
        t, vis = gt.map_points(cand[None])
        if vis[0]:
            anchor, target = cand, t[0]
            layer = int(gt.layer_index(cand[None])[0])
            break
    if anchor is None:
        return None

    origin_a = anchor - side_a / 2.0 if side_a < 1.0 else np.zeros(2)
    scale = local_scale(gt.layers[layer].motion, anchor)
    side_b = min(side_a * scale, 1.0)
    origin_b, side_b = _window_for(target, side_b)

    keep_q = np.empty((0, 2))
    keep_t = np.empty((0, 2))
    drawn = 0
    while len(keep_q) < n_corr and drawn < max_draws:
        batch = min(512, max_draws - drawn)
        drawn += batch
        uv = rng.uniform(0.0, 1.0, size=(batch, 2))
        pts = origin_a + side_a * uv
        tgt, vis = gt.map_points(pts)
        in_b = ((tgt >= origin_b) & (tgt <= origin_b + side_b)).all(axis=-1)
        good = vis & in_b
        keep_q = np.concatenate([keep_q, pts[good]])
        keep_t = np.concatenate([keep_t, tgt[good]])
    if len(keep_q) < n_corr:
        return None
    keep_q, keep_t = keep_q[:n_corr], keep_t[:n_corr]

    size = pair.image_a.shape[0]

    def cut(img, origin, side):
        if side >= 1.0 and size == model_size:
            return img  # whole-image regime at native size: resample is identity
        return crop_resample(img, origin * size, side * size,
                             model_size).astype(np.float32)

    crop_a = cut(pair.image_a, origin_a, side_a)
    crop_b = cut(pair.image_b, origin_b, side_b)
    return TrainSample(
        crop_a=crop_a,
        crop_b=crop_b,
        queries=((keep_q - origin_a) / side_a).astype(np.float32),
        targets=((keep_t - origin_b) / side_b).astype(np.float32),
        zoom_level=z,
        window_a=(origin_a, side_a),
        window_b=(origin_b, side_b),
        anchor=anchor,
    )


# -- plain-text scene options ---------------------------------------------------


_INT_FIELDS = {"n_layers", "n_waves", "n_blobs"}


def scene_options_to_text(options, seed=None):
    lines = [] if seed is None else [f"seed = {seed}"]
    for name in SceneOptions.__dataclass_fields__:
        lines.append(f"{name} = {getattr(options, name)}")
    return "\n".join(lines) + "\n"


def scene_options_from_text(text):
    """Parse 'key = value' lines ('#' comments allowed) back into options."""
    kwargs = {}
    seed = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "seed":
            seed = int(val)
        elif key in _INT_FIELDS:
            kwargs[key] = int(val)
        elif key in SceneOptions.__dataclass_fields__:
            kwargs[key] = float(val)
        else:
            raise ValueError(f"line {lineno}: unknown scene option {key!r}")
    return SceneOptions(**kwargs), seed
