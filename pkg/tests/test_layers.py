import numpy as np
import pytest

from utils.config import AttentionConfig, PyramidConfig
from utils.errors import ShapeError
from utils.layers import (
    VGG_CONV_COUNTS,
    VGG_WIDTHS,
    VggStageConfig,
    build_channel_attention,
    build_pyramid_pooling,
    build_spatial_attention,
    build_vgg_stage,
    channel_attention,
    pyramid_branches,
    pyramid_pooling,
    spatial_attention,
    vgg_stage_configs,
    vgg_stage_forward,
)
from utils.tensor_core import ModelParams, Tensor, grad_check, mul, sum_all


def zero_all(params: ModelParams):
    for p in params:
        p.data = np.zeros_like(p.data)


def projected_loss(out, projection):
    return sum_all(mul(out, Tensor(projection)))


class TestVggStageConfigs:
    def test_full_width_matches_vgg16(self):
        stages = vgg_stage_configs(3, 1.0)
        assert [s.conv_count for s in stages] == list(VGG_CONV_COUNTS)
        assert [s.out_channels for s in stages] == list(VGG_WIDTHS)
        assert [s.in_channels for s in stages] == [3, 64, 128, 256, 512]

    def test_too_narrow_rejected(self):
        with pytest.raises(ShapeError):
            vgg_stage_configs(4, 0.03)

    @pytest.mark.parametrize("multiplier", [0.125, 0.25, 1.0])
    def test_five_stage_shape_ladder(self, multiplier):
        params = ModelParams()
        stages = vgg_stage_configs(4, multiplier)
        for stage in stages:
            build_vgg_stage(params.scope(f"stage{stage.stage_index}"), stage, seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 32, 32)))
        for stage in stages:
            x = vgg_stage_forward(x, stage, params.scope(f"stage{stage.stage_index}"))
            size = 32 // 2 ** stage.stage_index
            assert x.shape == (1, round(multiplier * VGG_WIDTHS[stage.stage_index - 1]), size, size)


class TestVggStage:
    def test_stage1_full_width_shape(self):
        params = ModelParams()
        cfg = vgg_stage_configs(3, 1.0)[0]
        build_vgg_stage(params.scope("s"), cfg, seed=0)
        out = vgg_stage_forward(Tensor(np.zeros((1, 3, 64, 64))), cfg, params.scope("s"))
        assert out.shape == (1, 64, 32, 32)

    def test_stage5_narrow_shape(self):
        params = ModelParams()
        cfg = vgg_stage_configs(3, 0.125)[4]
        assert (cfg.in_channels, cfg.out_channels) == (64, 64)
        build_vgg_stage(params.scope("s"), cfg, seed=0)
        out = vgg_stage_forward(Tensor(np.ones((1, 64, 4, 4))), cfg, params.scope("s"))
        assert out.shape == (1, 64, 2, 2)

    def test_zero_weights_give_zero_output(self, rng):
        params = ModelParams()
        cfg = VggStageConfig(2, 2, 3, 8)
        build_vgg_stage(params.scope("s"), cfg, seed=0)
        zero_all(params)
        out = vgg_stage_forward(Tensor(rng.normal(size=(2, 3, 8, 8))), cfg, params.scope("s"))
        np.testing.assert_array_equal(out.data, np.zeros((2, 8, 4, 4)))

    def test_odd_size_rejected(self):
        params = ModelParams()
        cfg = VggStageConfig(1, 2, 3, 4)
        build_vgg_stage(params.scope("s"), cfg, seed=0)
        with pytest.raises(ShapeError):
            vgg_stage_forward(Tensor(np.zeros((1, 3, 5, 6))), cfg, params.scope("s"))

    def test_wrong_channel_count_rejected(self):
        params = ModelParams()
        cfg = VggStageConfig(1, 2, 3, 4)
        build_vgg_stage(params.scope("s"), cfg, seed=0)
        with pytest.raises(ShapeError):
            vgg_stage_forward(Tensor(np.zeros((1, 4, 4, 4))), cfg, params.scope("s"))

    def test_same_name_same_seed_same_init(self):
        cfg = VggStageConfig(1, 2, 3, 4)
        a, b = ModelParams(), ModelParams()
        build_vgg_stage(a.scope("main.stage1"), cfg, seed=7)
        build_vgg_stage(b.scope("main.stage1"), cfg, seed=7)
        for name in a.names():
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_he_normal_scale(self):
        params = ModelParams()
        cfg = VggStageConfig(3, 3, 256, 256)
        build_vgg_stage(params.scope("s"), cfg, seed=0)
        weight = params["s.conv2.weight"].data
        assert weight.std() == pytest.approx(np.sqrt(2.0 / (256 * 9)), rel=0.02)
        assert not params["s.conv2.bias"].data.any()


class TestChannelAttention:
    cfg = AttentionConfig()

    def build(self, channels=8, seed=0):
        params = ModelParams()
        build_channel_attention(params.scope("ca"), channels, self.cfg, seed)
        return params

    def test_bottleneck_width(self):
        params = self.build(8)
        assert params["ca.fc1.weight"].shape == (2, 8)
        assert params["ca.fc2.weight"].shape == (8, 2)

    def test_zero_mlp_halves_input(self, rng):
        params = self.build()
        zero_all(params)
        x = rng.normal(size=(2, 8, 5, 5))
        np.testing.assert_array_equal(channel_attention(Tensor(x), params.scope("ca"), self.cfg).data, 0.5 * x)

    def test_zero_input_gives_zero_output(self):
        params = self.build()
        out = channel_attention(Tensor(np.zeros((1, 8, 4, 4))), params.scope("ca"), self.cfg)
        np.testing.assert_array_equal(out.data, np.zeros((1, 8, 4, 4)))

    @pytest.mark.parametrize("seed", range(5))
    def test_never_increases_magnitude(self, seed):
        rng = np.random.default_rng(seed)
        params = self.build(seed=seed)
        x = rng.normal(size=(2, 8, 6, 6)) * 3
        out = channel_attention(Tensor(x), params.scope("ca"), self.cfg).data
        assert np.all(np.abs(out) <= np.abs(x))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        params = self.build(seed=seed)
        x = ModelParams()
        x.add("x", rng.normal(size=(2, 8, 4, 4)))
        projection = rng.normal(size=(2, 8, 4, 4))
        f = lambda: projected_loss(channel_attention(x["x"], params.scope("ca"), self.cfg), projection)
        assert grad_check(f, [x["x"], *params], seed=seed) < 1e-5


class TestSpatialAttention:
    cfg = AttentionConfig(spatial_kernel=3)

    def build(self, seed=0):
        params = ModelParams()
        build_spatial_attention(params.scope("sa"), self.cfg, seed)
        return params

    def test_conv_maps_two_channels_to_one(self):
        assert self.build()["sa.conv.weight"].shape == (1, 2, 3, 3)

    def test_zero_conv_halves_input(self, rng):
        params = self.build()
        zero_all(params)
        x = rng.normal(size=(1, 4, 5, 5))
        np.testing.assert_array_equal(spatial_attention(Tensor(x), params.scope("sa"), self.cfg).data, 0.5 * x)

    def test_zero_input_gives_zero_output(self):
        out = spatial_attention(Tensor(np.zeros((1, 4, 5, 5))), self.build().scope("sa"), self.cfg)
        np.testing.assert_array_equal(out.data, np.zeros((1, 4, 5, 5)))

    @pytest.mark.parametrize("seed", range(5))
    def test_never_increases_magnitude(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 4, 6, 6)) * 3
        out = spatial_attention(Tensor(x), self.build(seed).scope("sa"), self.cfg).data
        assert np.all(np.abs(out) <= np.abs(x))

    @pytest.mark.parametrize("seed", range(5))
    def test_attention_chain_gradients(self, seed):
        rng = np.random.default_rng(seed)
        params = self.build(seed)
        build_channel_attention(params.scope("ca"), 8, self.cfg, seed)
        x = ModelParams()
        x.add("x", rng.normal(size=(1, 8, 6, 6)))
        projection = rng.normal(size=(1, 8, 6, 6))

        def f():
            refined = channel_attention(x["x"], params.scope("ca"), self.cfg)
            return projected_loss(spatial_attention(refined, params.scope("sa"), self.cfg), projection)

        assert grad_check(f, [x["x"], *params], seed=seed) < 1e-5


class TestPyramidPooling:
    def build(self, channels, cfg, seed=0):
        params = ModelParams()
        build_pyramid_pooling(params.scope("pp"), channels, cfg, seed)
        return params

    def test_projection_shape(self):
        params = self.build(8, PyramidConfig())
        assert params["pp.proj.weight"].shape == (8, 40, 1, 1)

    def test_output_shape_matches_input(self, rng):
        cfg = PyramidConfig()
        params = self.build(8, cfg)
        out = pyramid_pooling(Tensor(rng.normal(size=(1, 8, 24, 24))), params.scope("pp"), cfg)
        assert out.shape == (1, 8, 24, 24)

    @pytest.mark.parametrize("size", [1, 2, 3, 5, 8])
    def test_bins_clamped_on_small_features(self, size, rng):
        cfg = PyramidConfig()
        params = self.build(4, cfg)
        out = pyramid_pooling(Tensor(rng.normal(size=(2, 4, size, size))), params.scope("pp"), cfg)
        assert out.shape == (2, 4, size, size)

    def test_constant_input_propagates(self):
        cfg = PyramidConfig()
        channels, groups = 3, 5
        params = self.build(channels, cfg)
        # each output channel averages its own channel over the five groups
        weight = np.zeros((channels, channels * groups, 1, 1))
        for c in range(channels):
            weight[c, [g * channels + c for g in range(groups)], 0, 0] = 1.0 / groups
        params["pp.proj.weight"].data = weight
        out = pyramid_pooling(Tensor(np.full((1, channels, 12, 12), 0.75)), params.scope("pp"), cfg)
        np.testing.assert_allclose(out.data, 0.75, atol=1e-12)

    def test_branches_match_brute_force(self):
        x = np.arange(36, dtype=np.float64).reshape(1, 1, 6, 6)
        branches = pyramid_branches(Tensor(x), PyramidConfig((1, 2)))
        np.testing.assert_allclose(branches[0].data, np.full((1, 1, 6, 6), x.mean()), atol=1e-12)
        # 2x2 pooled means of the 3x3 quadrants
        pooled = np.array([[7.0, 10.0], [25.0, 28.0]])
        coords = np.clip((np.arange(6) + 0.5) / 3 - 0.5, 0, 1)
        rows = pooled[0][None, :] * (1 - coords)[:, None] + pooled[1][None, :] * coords[:, None]
        expected = rows[:, 0][:, None] * (1 - coords)[None, :] + rows[:, 1][:, None] * coords[None, :]
        np.testing.assert_allclose(branches[1].data[0, 0], expected, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        cfg = PyramidConfig()
        params = self.build(4, cfg, seed)
        x = ModelParams()
        x.add("x", rng.normal(size=(1, 4, 8, 8)))
        projection = rng.normal(size=(1, 4, 8, 8))
        f = lambda: projected_loss(pyramid_pooling(x["x"], params.scope("pp"), cfg), projection)
        assert grad_check(f, [x["x"], *params], seed=seed) < 1e-5
