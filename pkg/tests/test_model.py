"""Network forward passes: encoding values, shapes, query independence."""

import numpy as np
import pytest

from corrmatch import model as M
from corrmatch import tensor as T
from corrmatch.model import (
    EmptyQueryError,
    ModelConfig,
    QueryPoint,
    build_context,
    backbone_features,
    context_grid,
    encode_points,
    forward_correspondence,
    forward_mlp_variant,
    init_params,
    model_forward,
    positional_encoding,
)
from corrmatch.tensor import Tensor

TINY = ModelConfig(input_size=32, d_model=8, enc_layers=1, dec_layers=1,
                   heads=2, head_hidden=8)


def rand_image(rng, size):
    return rng.uniform(0.0, 1.0, size=(size, size, 3)).astype(np.float32)


class TestPositionalEncoding:
    def test_origin(self):
        np.testing.assert_allclose(
            positional_encoding(np.array([0.0, 0.0]), 8),
            [0, 0, 1, 1, 0, 0, 1, 1], atol=1e-12)

    def test_half_and_one(self):
        np.testing.assert_allclose(
            positional_encoding(np.array([0.5, 1.0]), 4),
            [1.0, 0.0, 0.0, -1.0], atol=1e-12)

    def test_second_block(self):
        enc = positional_encoding(np.array([0.25, 0.75]), 8)
        np.testing.assert_allclose(enc[4:], [1.0, -1.0, 0.0, 0.0], atol=1e-12)

    def test_output_length_and_batching(self):
        xy = np.random.default_rng(0).uniform(0, 1, size=(5, 7, 2))
        assert positional_encoding(xy, 64).shape == (5, 7, 64)

    def test_rejects_bad_width(self):
        with pytest.raises(ValueError):
            positional_encoding(np.zeros(2), 6)

    def test_injective_on_feature_grid(self):
        # No two cells of the joint grid share an encoding at N >= 8.
        cfg = ModelConfig()
        grid = context_grid(cfg).reshape(-1, 2)
        enc = positional_encoding(grid, 8)
        flat = {tuple(np.round(row, 12)) for row in enc}
        assert len(flat) == len(grid)

    def test_tape_twin_is_bit_identical(self):
        rng = np.random.default_rng(4)
        xy = rng.uniform(0, 1, size=(3, 5, 2)).astype(np.float32)
        plain = positional_encoding(xy, 16)
        taped = encode_points(Tensor(xy), 16).data
        np.testing.assert_array_equal(plain, taped)

    def test_tape_twin_gradients(self):
        rng = np.random.default_rng(5)
        xy = rng.uniform(0, 1, size=(4, 2))
        err = T.check_gradient(
            lambda t: T.sqnorm(encode_points(t, 8)),
            Tensor(xy, dtype=np.float64))
        assert err <= 1e-4

    def test_loglinear_mode_differs_and_is_finite(self):
        xy = np.array([0.3, 0.7])
        lin = positional_encoding(xy, 16, "linear")
        log = positional_encoding(xy, 16, "loglinear")
        assert np.isfinite(log).all()
        assert not np.allclose(lin, log)


class TestContext:
    def test_grid_convention(self):
        cfg = TINY  # feat_size 2
        grid = context_grid(cfg)
        assert grid.shape == (2, 4, 2)
        np.testing.assert_allclose(grid[0, 0], [0.0, 0.0])
        np.testing.assert_allclose(grid[1, 3], [1.5, 0.5])
        assert grid[..., 0].max() < 2.0 and grid[..., 1].max() < 1.0

    def test_paper_scale_context_shape(self):
        cfg = ModelConfig(input_size=256, d_model=256, enc_layers=1,
                          dec_layers=1, heads=8, head_hidden=256)
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(1)
        ctx = build_context(rand_image(rng, 256), rand_image(rng, 256), params, cfg)
        assert ctx.shape == (1, 16, 32, 256)

    def test_default_scale_context_shape(self):
        cfg = ModelConfig()
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(2)
        ctx = build_context(rand_image(rng, 128), rand_image(rng, 128), params, cfg)
        assert ctx.shape == (1, 8, 16, 64)

    def test_identical_images_share_features_until_encoding(self):
        cfg = TINY
        params = init_params(cfg, seed=3)
        rng = np.random.default_rng(3)
        img = rand_image(rng, cfg.input_size)
        both = Tensor(np.stack([img, img]))
        feats = backbone_features(both, params, cfg).data
        np.testing.assert_array_equal(feats[0], feats[1])
        ctx = build_context(img, img, params, cfg).data[0]
        half = ctx.shape[1] // 2
        assert not np.array_equal(ctx[:, :half], ctx[:, half:])

    def test_rejects_wrong_image_shape(self):
        cfg = TINY
        params = init_params(cfg, seed=0)
        with pytest.raises(T.ShapeError):
            build_context(np.zeros((16, 16, 3), dtype=np.float32),
                          np.zeros((32, 32, 3), dtype=np.float32), params, cfg)


class TestForward:
    def setup_method(self):
        self.cfg = TINY
        self.params = init_params(self.cfg, seed=7)
        rng = np.random.default_rng(7)
        self.img_a = rand_image(rng, self.cfg.input_size)
        self.img_b = rand_image(rng, self.cfg.input_size)

    def test_batch_equals_singles_bitwise(self):
        rng = np.random.default_rng(8)
        queries = rng.uniform(0, 1, size=(64, 2)).astype(np.float32)
        batch = forward_correspondence(queries, self.img_a, self.img_b,
                                       self.params, self.cfg)
        for i in range(64):
            single = forward_correspondence(queries[i:i + 1], self.img_a,
                                            self.img_b, self.params, self.cfg)
            np.testing.assert_array_equal(batch[i:i + 1], single)

    def test_permutation_equivariance_bitwise(self):
        rng = np.random.default_rng(9)
        queries = rng.uniform(0, 1, size=(17, 2)).astype(np.float32)
        perm = rng.permutation(17)
        out = forward_correspondence(queries, self.img_a, self.img_b,
                                     self.params, self.cfg)
        out_p = forward_correspondence(queries[perm], self.img_a, self.img_b,
                                       self.params, self.cfg)
        np.testing.assert_array_equal(out[perm], out_p)

    def test_zeroed_final_layer_returns_bias(self):
        params = dict(self.params)
        params["head.l3.w"] = Tensor(np.zeros_like(params["head.l3.w"].data))
        params["head.l3.b"] = Tensor(np.array([0.25, 0.75], dtype=np.float32))
        out = forward_correspondence(np.array([[0.1, 0.9], [0.5, 0.5]], dtype=np.float32),
                                     self.img_a, self.img_b, params, self.cfg)
        np.testing.assert_array_equal(out, [[0.25, 0.75], [0.25, 0.75]])

    def test_accepts_query_points_and_rejects_empty(self):
        pts = [QueryPoint(0.2, 0.3), QueryPoint(0.8, 0.1)]
        out = forward_correspondence(pts, self.img_a, self.img_b,
                                     self.params, self.cfg)
        assert out.shape == (2, 2)
        with pytest.raises(EmptyQueryError):
            forward_correspondence([], self.img_a, self.img_b, self.params, self.cfg)

    def test_outputs_finite_for_unit_inputs(self):
        rng = np.random.default_rng(10)
        queries = rng.uniform(0, 1, size=(32, 2)).astype(np.float32)
        out = forward_correspondence(queries, self.img_a, self.img_b,
                                     self.params, self.cfg)
        assert np.isfinite(out).all()

    def test_gradient_through_full_model_matches_oracle(self):
        # Sampled parameter elements across the whole network against
        # central differences (full sweeps would straddle relu kinks).
        cfg = self.cfg
        params64 = init_params(cfg, seed=7, dtype=np.float64)
        rng = np.random.default_rng(11)
        img_a = rng.uniform(0, 1, size=(cfg.input_size,) * 2 + (3,))
        img_b = rng.uniform(0, 1, size=(cfg.input_size,) * 2 + (3,))
        queries = rng.uniform(0, 1, size=(1, 3, 2))

        def loss_of(p):
            out = model_forward(p, cfg, Tensor(img_a[None]), Tensor(img_b[None]),
                                Tensor(queries))
            return T.sqnorm(out)

        err, picked = T.check_gradient_sampled(loss_of, params64, n_samples=12,
                                               seed=101)
        assert err <= 1e-4, picked


class TestMlpVariant:
    def test_paper_scale_concat_width(self):
        cfg = ModelConfig(input_size=256, d_model=256, heads=8, variant="mlp")
        params = init_params(cfg, seed=0)
        assert params["mlp.l1.w"].shape == (768, 256)

    def test_output_shape_and_independence(self):
        cfg = ModelConfig(input_size=32, d_model=8, heads=2, variant="mlp")
        params = init_params(cfg, seed=1)
        rng = np.random.default_rng(12)
        img_a = rand_image(rng, 32)
        img_b = rand_image(rng, 32)
        queries = rng.uniform(0, 1, size=(9, 2)).astype(np.float32)
        out = forward_mlp_variant(queries, img_a, img_b, params, cfg)
        assert out.shape == (9, 2)
        for i in range(9):
            single = forward_mlp_variant(queries[i:i + 1], img_a, img_b, params, cfg)
            np.testing.assert_array_equal(out[i:i + 1], single)

    def test_variant_guards(self):
        cfg = ModelConfig(input_size=32, d_model=8, heads=2, variant="mlp")
        params = init_params(cfg, seed=1)
        img = np.zeros((32, 32, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            forward_correspondence(np.array([[0.5, 0.5]]), img, img, params, cfg)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(input_size=100)
        with pytest.raises(ValueError):
            ModelConfig(d_model=10)
        with pytest.raises(ValueError):
            ModelConfig(d_model=64, heads=5)
        with pytest.raises(ValueError):
            ModelConfig(pos_enc_mode="cubic")

    def test_roundtrip_dict(self):
        cfg = ModelConfig(input_size=64, d_model=32, heads=4)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_init_deterministic(self):
        a = init_params(TINY, seed=5)
        b = init_params(TINY, seed=5)
        assert set(a) == set(b)
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)
