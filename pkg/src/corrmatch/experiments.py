"""Reusable study drivers: coarse accuracy, zoom refinement, filter rates,
and the attention-vs-global-latent comparison.

These run on held-out seeded corpora so the numbers are reproducible; the
CLI's ``ablate`` command and the acceptance suite both call through here.
"""

from __future__ import annotations

import numpy as np

from .inference import InferenceConfig, match_sparse, refine_recursive, \
    estimate_covisibility_and_scale, NoCovisibilityError, _full_window
from .model import make_matcher
from .sampling import resize_image
from .synth import render_pair, sample_scene_spec

__all__ = [
    "held_out_pairs",
    "coarse_aepe",
    "zoom_error_medians",
    "filter_rates",
    "corpus_summary_line",
]


def held_out_pairs(seeds, options, size):
    return [render_pair(sample_scene_spec(s, options), size) for s in seeds]


def coarse_aepe(matcher, pairs, grid=24, model_size=None):
    """Mean end-point error in native pixels at the coarsest level only.

    Queries a grid over image one (ground-truth-visible points only) on the
    whole stretched images, no zoom-ins: the baseline the zoom study
    improves on.
    """
    s = model_size or matcher.config.input_size
    errors = []
    for pair in pairs:
        size = pair.image_a.shape[0]
        u = (np.arange(grid) + 0.5) / grid
        gx, gy = np.meshgrid(u, u)
        pts = np.stack([gx, gy], axis=-1).reshape(-1, 2)
        truth, visible = pair.gt.map_points(pts)
        if not visible.any():
            continue
        a_rs = resize_image(pair.image_a, s).astype(np.float32)
        b_rs = resize_image(pair.image_b, s).astype(np.float32)
        est = matcher(pts[visible].astype(np.float32), a_rs, b_rs,
                      _full_window(pair.image_a), _full_window(pair.image_b))
        err = np.linalg.norm((np.asarray(est, dtype=np.float64)
                              - truth[visible]) * size, axis=-1)
        errors.append(err)
    if not errors:
        raise ValueError("no visible ground truth anywhere in the corpus")
    return float(np.concatenate(errors).mean())


def zoom_error_medians(matcher, pairs, icfg, n_queries=40, seed=0):
    """Median end-point error (native px) per zoom step across a corpus."""
    rng = np.random.default_rng(seed)
    per_step_errors = [[] for _ in range(icfg.zoom.steps + 1)]
    for pair in pairs:
        size = pair.image_a.shape[0]
        covis = None
        try:
            covis = estimate_covisibility_and_scale(pair.image_a, pair.image_b,
                                                    matcher, icfg)
        except NoCovisibilityError:
            continue
        drawn = 0
        while drawn < n_queries:
            pts = rng.uniform(0.08, 0.92, size=(n_queries * 2, 2))
            truth, visible = pair.gt.map_points(pts)
            for p, t in zip(pts[visible], truth[visible]):
                if drawn >= n_queries:
                    break
                drawn += 1
                est = refine_recursive(p * size, pair.image_a, pair.image_b,
                                       matcher, icfg, covis=covis)
                for step, e in enumerate(est.per_step):
                    err = np.linalg.norm(e - t * size)
                    per_step_errors[step].append(err)
            if not visible.any():
                break
    return [float(np.median(v)) if v else float("nan") for v in per_step_errors]


def filter_rates(matcher, pairs, icfg, n_queries=60, invisible_frac=0.3, seed=0):
    """Rejection rate on ground-truth-invisible queries and acceptance rate
    on visible ones, pooled over the corpus."""
    rng = np.random.default_rng(seed)
    rejected_invis, total_invis = 0, 0
    accepted_vis, total_vis = 0, 0
    want_invis = int(round(n_queries * invisible_frac))
    want_vis = n_queries - want_invis
    for pair in pairs:
        size = pair.image_a.shape[0]
        pts = rng.uniform(0.02, 0.98, size=(n_queries * 30, 2))
        _, visible = pair.gt.map_points(pts)
        vis_pts = pts[visible][:want_vis]
        invis_pts = pts[~visible][:want_invis]
        queries = np.concatenate([vis_pts, invis_pts]) * size
        if len(queries) == 0:
            continue
        ests = match_sparse(queries, pair.image_a, pair.image_b, matcher, icfg)
        flags = np.array([e.accepted for e in ests])
        nv = len(vis_pts)
        accepted_vis += int(flags[:nv].sum())
        total_vis += nv
        rejected_invis += int((~flags[nv:]).sum())
        total_invis += len(invis_pts)
    if total_invis == 0 or total_vis == 0:
        raise ValueError("corpus produced no usable query mix")
    return rejected_invis / total_invis, 1.0 - accepted_vis / total_vis


def corpus_summary_line(name, value, fmt="{:.3f}"):
    return f"{name}=" + fmt.format(value)
