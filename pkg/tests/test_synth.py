"""Scene generator: exact ground truth, visibility, crop sampling."""

import numpy as np
import pytest

from corrmatch.synth import (
    ZOOM_LEVELS,
    DegenerateHomographyError,
    GroundTruthMap,
    SceneOptions,
    apply_homography,
    homography_from_corners,
    local_scale,
    render_pair,
    sample_scene_spec,
    sample_training_crop,
    scene_options_from_text,
    scene_options_to_text,
)

IDENTITY = np.eye(3)


def translation(tx, ty):
    h = np.eye(3)
    h[0, 2], h[1, 2] = tx, ty
    return h


class TestHomography:
    def test_four_point_solve_roundtrip(self):
        rng = np.random.default_rng(0)
        src = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
        dst = src + rng.uniform(-0.2, 0.2, size=(4, 2))
        h = homography_from_corners(src, dst)
        np.testing.assert_allclose(apply_homography(h, src), dst, atol=1e-10)

    def test_projective_formula_oracle(self):
        # Hand-applied (H p) / w for a full projective matrix.
        h = np.array([[1.2, 0.1, 0.05],
                      [-0.2, 0.9, 0.1],
                      [0.3, -0.1, 1.0]])
        p = np.array([0.4, 0.7])
        w = 0.3 * 0.4 - 0.1 * 0.7 + 1.0
        expect = np.array([(1.2 * 0.4 + 0.1 * 0.7 + 0.05) / w,
                           (-0.2 * 0.4 + 0.9 * 0.7 + 0.1) / w])
        np.testing.assert_allclose(apply_homography(h, p), expect, rtol=1e-14)

    def test_pure_zoom(self):
        h = np.diag([2.0, 2.0, 1.0])
        np.testing.assert_allclose(apply_homography(h, [0.25, 0.25]), [0.5, 0.5])
        assert local_scale(h, [0.25, 0.25]) == pytest.approx(2.0)

    def test_forward_then_inverse_identity(self):
        rng = np.random.default_rng(1)
        for seed in range(5):
            spec = sample_scene_spec(seed)
            h = spec.layers[0].motion
            pts = rng.uniform(0, 1, size=(50, 2))
            back = apply_homography(np.linalg.inv(h), apply_homography(h, pts))
            assert np.abs(back - pts).max() < 1e-6

    def test_singular_replacement_rejected(self):
        spec = sample_scene_spec(3)
        with pytest.raises(DegenerateHomographyError):
            spec.with_motions([np.zeros((3, 3))])


class TestGroundTruth:
    def test_identity_motion_maps_points_to_themselves(self):
        spec = sample_scene_spec(7).with_motions([IDENTITY])
        gt = GroundTruthMap(spec)
        pts = np.random.default_rng(2).uniform(0, 1, size=(40, 2))
        tgt, vis = gt.map_points(pts)
        np.testing.assert_allclose(tgt, pts, atol=1e-12)
        assert vis.all()

    def test_translation_moves_and_clips_visibility(self):
        spec = sample_scene_spec(8).with_motions([translation(0.2, 0.0)])
        gt = GroundTruthMap(spec)
        tgt, vis = gt.map_points(np.array([[0.9, 0.5], [0.3, 0.5]]))
        np.testing.assert_allclose(tgt[0], [1.1, 0.5], atol=1e-12)
        assert not vis[0] and vis[1]

    def test_occlusion_by_front_layer(self):
        # Background static; foreground moves left by 0.3 so it covers
        # background points that used to be to its left in view two.
        spec = sample_scene_spec(9, SceneOptions(n_layers=2))
        spec = spec.with_motions([IDENTITY, translation(-0.3, 0.0)])
        gt = GroundTruthMap(spec)
        poly = spec.layers[1].region
        inside_probe = poly.mean(axis=0)          # centroid of a convex poly
        probe = inside_probe - np.array([0.3, 0.0])
        if (probe >= 0).all() and (probe <= 1).all():
            own = gt.layer_index(probe[None])[0]
            if own == 0:  # probe must itself be background in view one
                _, vis = gt.map_points(probe[None])
                assert not vis[0]

    def test_identity_scene_renders_bit_identical_views(self):
        spec = sample_scene_spec(10)
        spec = spec.with_motions([IDENTITY])
        spec = type(spec)(seed=spec.seed, layers=spec.layers,
                          brightness=0.0, contrast=1.0)
        pair = render_pair(spec, 96)
        np.testing.assert_array_equal(pair.image_a, pair.image_b)

    def test_render_determinism(self):
        a = render_pair(sample_scene_spec(11), 96)
        b = render_pair(sample_scene_spec(11), 96)
        np.testing.assert_array_equal(a.image_a, b.image_a)
        np.testing.assert_array_equal(a.image_b, b.image_b)

    def test_two_layers_make_discontinuous_flow(self):
        spec = sample_scene_spec(12, SceneOptions(n_layers=2))
        spec = spec.with_motions([translation(0.08, 0.0), translation(-0.08, 0.0)])
        gt = GroundTruthMap(spec)
        flow, valid = gt.flow_field_arrays(96)
        fx = flow[..., 0][valid]
        assert fx.max() - fx.min() > 0.1 * 96  # both motions present
        # jump across the region boundary exceeds any in-layer variation
        jumps = np.abs(np.diff(flow[..., 0], axis=1))
        assert jumps.max() > 0.12 * 96

    def test_projective_inside_each_layer(self):
        spec = sample_scene_spec(13)
        gt = GroundTruthMap(spec)
        pts = np.random.default_rng(3).uniform(0, 1, size=(100, 2))
        tgt, _ = gt.map_points(pts)
        np.testing.assert_allclose(
            tgt, apply_homography(spec.layers[0].motion, pts), atol=1e-12)


class TestTrainingCrops:
    def test_zoom_levels_exact(self):
        assert ZOOM_LEVELS[0] == 1.0
        assert ZOOM_LEVELS[-1] == 10.0
        np.testing.assert_allclose(ZOOM_LEVELS, 10 ** (np.arange(10) / 9), rtol=0)

    def test_sample_is_deterministic(self):
        pair = render_pair(sample_scene_spec(20), 128)
        a = sample_training_crop(pair, np.random.default_rng(5), 64)
        b = sample_training_crop(pair, np.random.default_rng(5), 64)
        assert a is not None and b is not None
        np.testing.assert_array_equal(a.crop_a, b.crop_a)
        np.testing.assert_array_equal(a.queries, b.queries)
        assert a.zoom_level == b.zoom_level

    def test_anchor_centered_when_zoomed(self):
        pair = render_pair(sample_scene_spec(21), 128)
        s = sample_training_crop(pair, np.random.default_rng(6), 64, zoom=4.0)
        assert s is not None
        origin, side = s.window_a
        crop_norm = (s.anchor - origin) / side
        np.testing.assert_allclose(crop_norm, [0.5, 0.5], atol=1e-12)

    def test_exactly_100_correspondences_consistent_with_gt(self):
        pair = render_pair(sample_scene_spec(22), 128)
        s = sample_training_crop(pair, np.random.default_rng(7), 64, zoom=2.0)
        assert s is not None and len(s.queries) == 100 and len(s.targets) == 100
        oa, sa = s.window_a
        ob, sb = s.window_b
        orig_q = oa + sa * s.queries.astype(np.float64)
        orig_t = ob + sb * s.targets.astype(np.float64)
        expect, vis = pair.gt.map_points(orig_q)
        assert vis.all()
        assert np.abs(expect - orig_t).max() < 1e-6
        assert (s.queries >= 0).all() and (s.queries <= 1).all()
        assert (s.targets >= 0).all() and (s.targets <= 1).all()

    def test_pair_with_too_few_covisible_points_skipped(self):
        spec = sample_scene_spec(23).with_motions([translation(0.99, 0.0)])
        pair = render_pair(spec, 128)
        s = sample_training_crop(pair, np.random.default_rng(8), 64, zoom=1.0)
        assert s is None

    def test_whole_image_regime(self):
        pair = render_pair(sample_scene_spec(24), 128)
        s = sample_training_crop(pair, np.random.default_rng(9), 128, zoom=1.0)
        assert s is not None
        np.testing.assert_array_equal(s.crop_a, pair.image_a)
        assert s.zoom_level == 1.0


class TestSceneOptionsText:
    def test_roundtrip(self):
        opts = SceneOptions(n_layers=2, translation=0.2)
        text = scene_options_to_text(opts, seed=77)
        back, seed = scene_options_from_text(text)
        assert back == opts and seed == 77

    def test_rejects_garbage(self):
        with pytest.raises(ValueError, match="line 1"):
            scene_options_from_text("not a key value line")
        with pytest.raises(ValueError, match="unknown"):
            scene_options_from_text("bogus = 3")
