import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hbformer.config import ModelConfig, micro_config
from hbformer.decoder import (
    ChannelAttention,
    MedDSPP,
    MFFStage,
    SpatialAttention,
    med_dspp,
)
from hbformer.gradcheck import check_module, fractional_offsets
from hbformer.model import HBFormer
from hbformer.tensor import ShapeError, Tensor, no_grad


def tap_conv(x, w, pad, dil):
    """Stride-1 3x3 convolution as a sum of nine shifted channel mixes."""
    h, wd = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - 2 * dil, wd + 2 * pad - 2 * dil
    out = np.zeros((x.shape[0], w.shape[0], ho, wo))
    for i in range(3):
        for j in range(3):
            patch = xp[:, :, i * dil:i * dil + ho, j * dil:j * dil + wo]
            out += np.einsum("oc,bchw->bohw", w[:, :, i, j], patch)
    return out


def leaky(x, slope=0.01):
    return np.where(x > 0, x, slope * x)


def aspp_oracle(x, block: MedDSPP):
    """Reference pyramid with undeformed sampling and batch statistics."""
    ys = []
    for br in block.branches:
        y = tap_conv(x, br.deform_weight.data.astype(np.float64), 1, 1)
        z = tap_conv(y, br.dilated.weight.data.astype(np.float64), br.rate, br.rate)
        mu = z.mean(axis=(0, 2, 3), keepdims=True)
        var = z.var(axis=(0, 2, 3), keepdims=True)
        ys.append(leaky((z - mu) / np.sqrt(var + br.bn.eps)))
    cat = np.concatenate(ys, axis=1)
    fw = block.fuse.weight.data[:, :, 0, 0].astype(np.float64)
    fused = np.einsum("oc,bchw->bohw", fw, cat) + block.fuse.bias.data[None, :, None, None]
    return x + fused


class TestMedDSPP:
    def test_matches_aspp_at_init(self):
        rng = np.random.default_rng(0)
        block = MedDSPP(4, (1, 2, 3, 4), rng)
        block.fuse.bias.data[...] = rng.standard_normal(4)
        block.to(np.float64)
        x = rng.standard_normal((2, 4, 10, 10))
        out = med_dspp(Tensor(x), block).numpy()
        assert np.abs(out - aspp_oracle(x, block)).max() < 1e-6

    def test_zero_fuse_is_identity(self):
        block = MedDSPP(3, (1, 6), np.random.default_rng(1))
        block.fuse.weight.data[...] = 0
        block.fuse.bias.data[...] = 0
        x = np.random.default_rng(2).standard_normal((1, 3, 8, 8)).astype(np.float32)
        npt.assert_array_equal(block(Tensor(x)).numpy(), x)

    def test_channel_mismatch(self):
        block = MedDSPP(3, (1,), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            med_dspp(Tensor(np.zeros((1, 4, 8, 8))), block)

    @pytest.mark.parametrize("rate", [1, 6, 12, 18])
    def test_dilated_impulse_response(self, rate):
        block = MedDSPP(1, (rate,), np.random.default_rng(3))
        conv = block.branches[0].dilated
        x = np.zeros((1, 1, 41, 41), np.float32)
        x[0, 0, 20, 20] = 1.0
        out = conv(Tensor(x)).numpy()[0, 0]
        rows, cols = np.nonzero(out)
        offsets = {(int(r) - 20, int(c) - 20) for r, c in zip(rows, cols)}
        expected = {(dy, dx) for dy in (-rate, 0, rate) for dx in (-rate, 0, rate)}
        assert offsets == expected

    def test_receptive_field_covers_37(self):
        block = MedDSPP(2, (1, 6, 12, 18), np.random.default_rng(4)).eval()
        block.to(np.float64)
        x = Tensor(np.random.default_rng(5).standard_normal((1, 2, 64, 64)), requires_grad=True)
        out = block(x)
        out[0, 0, 32, 32].backward()
        rows, cols = np.nonzero(np.abs(x.grad).sum(axis=(0, 1)))
        assert rows.max() - rows.min() + 1 >= 37
        assert cols.max() - cols.min() + 1 >= 37


class TestGates:
    def test_gate_bounds(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 8, 6, 6)) * 50)
        for gate in (ChannelAttention(8, np.random.default_rng(1)), SpatialAttention(8, np.random.default_rng(2))):
            g = gate.gate(x).numpy()
            assert (g >= 0).all() and (g <= 1).all()

    def test_channel_gate_shape(self):
        g = ChannelAttention(8, np.random.default_rng(1)).gate(Tensor(np.ones((2, 8, 5, 5))))
        assert g.shape == (2, 8, 1, 1)

    def test_spatial_gate_constant_on_constant_map(self):
        sa = SpatialAttention(4, np.random.default_rng(3))
        g = sa.gate(Tensor(np.full((1, 4, 9, 9), 0.3))).numpy()
        assert g.shape == (1, 1, 9, 9)
        npt.assert_allclose(g, g[0, 0, 0, 0], atol=1e-7)


class TestMFFStage:
    def test_shapes(self):
        stage = MFFStage(8, 4, (1, 2), np.random.default_rng(0))
        out = stage(Tensor(np.ones((2, 8, 4, 4))), Tensor(np.ones((2, 4, 8, 8))))
        assert out.shape == (2, 4, 8, 8)

    def test_zero_skip_is_finite(self):
        stage = MFFStage(8, 4, (1, 2), np.random.default_rng(1))
        below = Tensor(np.random.default_rng(2).standard_normal((2, 8, 4, 4)))
        out = stage(below, Tensor(np.zeros((2, 4, 8, 8)))).numpy()
        assert np.isfinite(out).all() and np.abs(out).max() > 0

    def test_skip_resolution_checked(self):
        stage = MFFStage(8, 4, (1,), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            stage(Tensor(np.ones((1, 8, 4, 4))), Tensor(np.ones((1, 4, 6, 6))))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        stage = MFFStage(4, 2, (1, 2), rng)
        stage.to(np.float64)
        fractional_offsets(stage, rng)
        below = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
        skip = Tensor(rng.standard_normal((2, 2, 8, 8)), requires_grad=True)
        weights = Tensor(rng.standard_normal((2, 2, 8, 8)))
        err = check_module(stage, lambda: (stage(below, skip) * weights).sum(), inputs=[below, skip])
        assert err < 1e-3


@pytest.fixture(scope="module")
def desk_model():
    return HBFormer(ModelConfig(), np.random.default_rng(0))


class TestFullModel:
    def test_desk_logits_shape(self, desk_model):
        with no_grad():
            out = desk_model(Tensor(np.zeros((2, 3, 64, 64))))
        assert out.shape == (2, 2, 64, 64)

    def test_finite_over_repeated_passes(self, desk_model):
        rng = np.random.default_rng(1)
        desk_model.train()
        with no_grad():
            for _ in range(10):
                out = desk_model(Tensor(rng.random((1, 3, 64, 64)))).numpy()
                assert np.isfinite(out).all()

    def test_plain_decoder_same_shape_fewer_params(self):
        mff = HBFormer(micro_config(), 0)
        plain = HBFormer(micro_config(use_mff_decoder=False), 0)
        x = Tensor(np.random.default_rng(2).random((1, 3, 32, 32)))
        with no_grad():
            assert mff(x).shape == plain(x).shape == (1, 3, 32, 32)
        assert plain.num_parameters() < mff.num_parameters()

    def test_toggle_matrix_gives_distinct_parameter_sets(self):
        names = set()
        for effn in (True, False):
            for mff in (True, False):
                model = HBFormer(micro_config(use_effn=effn, use_mff_decoder=mff), 0)
                names.add(frozenset(n for n, _ in model.named_parameters()))
        assert len(names) == 4

    def test_bilinear_head(self):
        model = HBFormer(micro_config(head_upsample="bilinear"), 0)
        with no_grad():
            assert model(Tensor(np.zeros((1, 3, 32, 32)))).shape == (1, 3, 32, 32)

    @settings(max_examples=6, deadline=None)
    @given(st.sampled_from([32, 64]), st.sampled_from([2, 4]), st.booleans(), st.integers(2, 4))
    def test_output_resolution(self, img, patch, mff, classes):
        cfg = micro_config(img_size=img, patch_size=patch, use_mff_decoder=mff, num_classes=classes)
        model = HBFormer(cfg, 0)
        with no_grad():
            assert model(Tensor(np.zeros((1, 3, img, img)))).shape == (1, classes, img, img)
