import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hbformer.config import ConfigError, ModelConfig, micro_config
from hbformer.encoder import Encoder, PatchEmbed, PatchMerging
from hbformer.tensor import ShapeError, Tensor, no_grad


def layer_norm_np(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def encoder_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of the encoder for a configuration."""
    c1, p = cfg.stage_widths[0], cfg.patch_size
    total = c1 * cfg.in_channels * p * p + c1 + 2 * c1
    for i, (c, depth, heads) in enumerate(zip(cfg.stage_widths, cfg.stage_depths, cfg.heads_per_stage)):
        res = cfg.token_side // 2 ** i
        m = min(cfg.window_size, res)
        hidden = cfg.effn_ratio * c
        attn = (c * 3 * c + 3 * c) + (c * c + c) + (2 * m - 1) ** 2 * heads
        if cfg.use_effn:
            ffn = (c * hidden + hidden) + (hidden * 9 + hidden) + (hidden * hidden + hidden) + (hidden * c + c)
        else:
            ffn = (c * hidden + hidden) + (hidden * c + c)
        total += depth * (2 * c + attn + 2 * c + ffn)
        if i < 3:
            total += 2 * 4 * c + 4 * c * 2 * c
    return total


def small_config(**changes):
    base = dict(img_size=32, stage_widths=(8, 16, 32, 64), stage_depths=(2, 2, 2, 2),
                heads_per_stage=(1, 2, 2, 4), window_size=2, effn_ratio=2)
    base.update(changes)
    return ModelConfig(**base)


class TestPatchEmbed:
    def test_desk_shape(self):
        embed = PatchEmbed(3, 96, 4, np.random.default_rng(0))
        assert embed(Tensor(np.zeros((1, 3, 64, 64)))).shape == (1, 256, 96)

    def test_constant_image_gives_identical_tokens(self):
        embed = PatchEmbed(3, 8, 4, np.random.default_rng(1))
        out = embed(Tensor(np.full((1, 3, 16, 16), 0.7))).numpy()[0]
        npt.assert_allclose(out, np.broadcast_to(out[:1], out.shape), atol=1e-6)

    def test_equals_strided_conv_then_norm(self):
        rng = np.random.default_rng(2)
        embed = PatchEmbed(3, 6, 4, rng)
        embed.bias.data[...] = rng.standard_normal(6)
        x = rng.random((2, 3, 8, 8)).astype(np.float32)
        w = embed.weight.data.astype(np.float64)
        # every patch is one dot product with the flattened kernel
        patches = x.reshape(2, 3, 2, 4, 2, 4).transpose(0, 2, 4, 1, 3, 5).reshape(2, 4, 48)
        tokens = patches @ w.reshape(6, 48).T + embed.bias.data
        npt.assert_allclose(embed(Tensor(x)).numpy(), layer_norm_np(tokens), atol=1e-5)

    def test_indivisible_input(self):
        with pytest.raises(ShapeError):
            PatchEmbed(3, 8, 4, np.random.default_rng(0))(Tensor(np.zeros((1, 3, 10, 12))))


class TestPatchMerging:
    def test_two_by_two_grid_gives_one_token(self):
        pm = PatchMerging(5, np.random.default_rng(0))
        assert pm(Tensor(np.ones((1, 4, 5))), (2, 2)).shape == (1, 1, 10)

    def test_width_ladder(self):
        widths = [96]
        for _ in range(3):
            pm = PatchMerging(widths[-1], np.random.default_rng(0))
            widths.append(pm.reduction.weight.shape[0])
        assert widths == [96, 192, 384, 768]

    def test_gather_order_matches_coordinates(self):
        h, w = 4, 6
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        x = np.stack([rows, cols], axis=-1).reshape(1, h * w, 2).astype(np.float64)
        out = PatchMerging.gather(Tensor(x), (h, w)).numpy()[0]
        for t in range(out.shape[0]):
            i, j = divmod(t, w // 2)
            expected = [(2 * i, 2 * j), (2 * i + 1, 2 * j), (2 * i, 2 * j + 1), (2 * i + 1, 2 * j + 1)]
            got = [tuple(out[t, 2 * k:2 * k + 2].astype(int)) for k in range(4)]
            assert got == expected

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            PatchMerging(2, np.random.default_rng(0))(Tensor(np.ones((1, 9, 2))), (3, 3))


@pytest.fixture(scope="module")
def desk_encoder():
    return Encoder(ModelConfig(), np.random.default_rng(0))


class TestEncoder:
    def test_desk_skip_shapes(self, desk_encoder):
        with no_grad():
            out = desk_encoder(Tensor(np.zeros((1, 3, 64, 64))))
        assert [s.shape for s in out.skips] == [(1, 256, 96), (1, 64, 192), (1, 16, 384), (1, 4, 768)]
        assert out.bottleneck is out.skips[-1]
        assert out.as_map(1).shape == (1, 192, 8, 8)

    def test_desk_parameter_count(self, desk_encoder):
        assert desk_encoder.num_parameters() == encoder_param_count(ModelConfig())

    @pytest.mark.parametrize("use_effn", [True, False])
    def test_small_parameter_count(self, use_effn):
        cfg = small_config(use_effn=use_effn, stage_depths=(2, 4, 2, 2))
        assert Encoder(cfg, np.random.default_rng(0)).num_parameters() == encoder_param_count(cfg)

    def test_batch_independence_in_eval(self):
        enc = Encoder(micro_config(), np.random.default_rng(1)).eval()
        x = np.random.default_rng(2).random((2, 3, 32, 32)).astype(np.float32)
        with no_grad():
            both = enc(Tensor(x))
            single = [enc(Tensor(x[i:i + 1])) for i in range(2)]
        for k in range(4):
            joined = np.concatenate([s.skips[k].numpy() for s in single])
            assert np.abs(both.skips[k].numpy() - joined).max() < 1e-6

    def test_eval_determinism(self):
        enc = Encoder(micro_config(), np.random.default_rng(3)).eval()
        x = Tensor(np.random.default_rng(4).random((1, 3, 32, 32)))
        with no_grad():
            a = enc(x).bottleneck.numpy()
            b = enc(x).bottleneck.numpy()
        assert a.tobytes() == b.tobytes()

    def test_wrong_input_shape(self):
        enc = Encoder(micro_config(), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            enc(Tensor(np.zeros((1, 3, 16, 16))))

    def test_ffn_variant_differs_only_inside_ffn(self):
        a = {n for n, _ in Encoder(micro_config(), np.random.default_rng(0)).named_parameters()}
        b = {n for n, _ in Encoder(micro_config(use_effn=False), np.random.default_rng(0)).named_parameters()}
        assert all(".effn." in n for n in a - b) and a - b
        assert all(".mlp." in n for n in b - a) and b - a

    @settings(max_examples=8, deadline=None)
    @given(st.sampled_from([1, 2, 4]), st.sampled_from([2, 4]), st.sampled_from([1, 2]),
           st.sampled_from([(2, 2, 2, 2), (2, 4, 2, 2)]), st.integers(0, 100))
    def test_skip_ladder_property(self, patch, c1, windows, depths, seed):
        img = patch * 8 * (1 + seed % 2)
        cfg = ModelConfig(img_size=img, patch_size=patch, stage_widths=(c1, 2 * c1, 4 * c1, 8 * c1),
                          stage_depths=depths, heads_per_stage=(1, 1, 2, 2), window_size=windows,
                          effn_ratio=1)
        enc = Encoder(cfg, np.random.default_rng(seed))
        with no_grad():
            out = enc(Tensor(np.random.default_rng(seed).random((1, 3, img, img))))
        side = img // patch
        for i, skip in enumerate(out.skips):
            assert skip.shape == (1, (side // 2 ** i) ** 2, c1 * 2 ** i)


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.stage_widths == (96, 192, 384, 768)
        assert cfg.dspp_rates == (1, 6, 12, 18)

    def test_image_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(img_size=60)

    def test_widths_must_double(self):
        with pytest.raises(ConfigError):
            ModelConfig(stage_widths=(96, 192, 384, 700))
