import itertools

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hbformer import ops
from hbformer.gradcheck import check_function
from hbformer.module import Conv2d
from hbformer.tensor import ShapeError, Tensor


def direct_conv(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    """Six nested loops over (batch, out channel, out row, out col, tap row, tap col)."""
    bsz, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    ho = (h + 2 * padding - (kh - 1) * dilation - 1) // stride + 1
    wo = (wd + 2 * padding - (kw - 1) * dilation - 1) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    per_group = cout // groups
    for n in range(bsz):
        for o in range(cout):
            g = o // per_group
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for u in range(kh):
                        for v in range(kw):
                            y = i * stride - padding + u * dilation
                            xx = j * stride - padding + v * dilation
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += x[n, g * cg:(g + 1) * cg, y, xx] @ w[o, :, u, v]
                    out[n, o, i, j] = acc
    return out


def bilinear_sample(img, y, x):
    """Value of a 2-D map at a fractional point, zero outside."""
    h, w = img.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    total = 0.0
    for dy, dx in itertools.product((0, 1), (0, 1)):
        yy, xx = y0 + dy, x0 + dx
        if 0 <= yy < h and 0 <= xx < w:
            wy = 1 - abs(y - yy)
            wx = 1 - abs(x - xx)
            total += wy * wx * img[yy, xx]
    return total


def direct_deform(x, offsets, w, padding=1):
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = offsets.shape[2:]
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for i in range(ho):
            for j in range(wo):
                for t, (u, v) in enumerate(itertools.product(range(kh), range(kw))):
                    py = i - padding + u + offsets[n, 2 * t, i, j]
                    px = j - padding + v + offsets[n, 2 * t + 1, i, j]
                    vals = np.array([bilinear_sample(x[n, c], py, px) for c in range(cin)])
                    out[n, :, i, j] += w[:, :, u, v] @ vals
    return out


class TestConv2d:
    def test_identity_1x1(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        npt.assert_array_equal(out.numpy(), x)

    def test_counting_taps(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
        expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]])
        npt.assert_array_equal(out.numpy()[0, 0], expected)

    @pytest.mark.parametrize("k,dilation", [(1, 1), (3, 1), (3, 6), (3, 12), (3, 18)])
    def test_matches_six_loop_oracle_on_model_kernels(self, k, dilation):
        rng = np.random.default_rng(k * 100 + dilation)
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        pad = dilation if k == 3 else 0
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=pad, dilation=dilation).numpy()
        npt.assert_allclose(out, direct_conv(x, w, b, padding=pad, dilation=dilation), atol=1e-10)

    @pytest.mark.parametrize("stride,padding,groups", [(2, 1, 1), (2, 0, 2), (1, 2, 2), (3, 1, 1)])
    def test_matches_oracle_stride_and_groups(self, stride, padding, groups):
        rng = np.random.default_rng(stride + 10 * padding + 100 * groups)
        x = rng.standard_normal((2, 4, 7, 7)).astype(np.float32)
        w = rng.standard_normal((6, 4 // groups, 3, 3)).astype(np.float32)
        out = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding, groups=groups)
        npt.assert_allclose(
            out.numpy(), direct_conv(x.astype(np.float64), w, None, stride, padding, 1, groups), atol=1e-5
        )

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_non_integer_output_size_rejected(self):
        with pytest.raises(ShapeError, match="non-integer"):
            ops.conv2d(Tensor(np.ones((1, 1, 8, 8))), Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(4, 7),
        st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 2), st.integers(1, 3),
        st.integers(0, 2**16),
    )
    def test_property_matches_oracle(self, bsz, cin, cout, size, k, stride, padding, dilation, seed):
        span = size + 2 * padding - (k - 1) * dilation - 1
        if span < 0 or span % stride:
            return
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((bsz, cin, size, size))
        w = rng.standard_normal((cout, cin, k, k))
        out = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding, dilation=dilation)
        npt.assert_allclose(out.numpy(), direct_conv(x, w, None, stride, padding, dilation), atol=1e-9)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        inputs = [rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]
        err = check_function(lambda x, w, b: ops.conv2d(x, w, b, padding=2, dilation=2), inputs)
        assert err < 1e-4


class TestDepthwise:
    def test_single_channel_equals_conv(self):
        rng = np.random.default_rng(0)
        x, w = rng.standard_normal((2, 1, 5, 5)), rng.standard_normal((1, 1, 3, 3))
        npt.assert_allclose(
            ops.depthwise_conv2d(Tensor(x), Tensor(w), padding=1).numpy(),
            ops.conv2d(Tensor(x), Tensor(w), padding=1).numpy(),
            atol=1e-12,
        )

    def test_identity_kernels(self):
        x = np.random.default_rng(1).standard_normal((1, 2, 4, 4))
        w = np.zeros((2, 1, 3, 3))
        w[:, 0, 1, 1] = 1
        npt.assert_allclose(ops.depthwise_conv2d(Tensor(x), Tensor(w), padding=1).numpy(), x, atol=1e-12)

    def test_equals_block_diagonal_full_conv(self):
        rng = np.random.default_rng(2)
        c = 4
        x, w, b = rng.standard_normal((2, c, 6, 6)), rng.standard_normal((c, 1, 3, 3)), rng.standard_normal(c)
        full = np.zeros((c, c, 3, 3))
        for i in range(c):
            full[i, i] = w[i, 0]
        out = ops.depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b), padding=2, dilation=2).numpy()
        ref = ops.conv2d(Tensor(x), Tensor(full), Tensor(b), padding=2, dilation=2).numpy()
        npt.assert_allclose(out, ref, atol=1e-6)

    def test_groups_must_equal_channels(self):
        with pytest.raises(ShapeError):
            ops.depthwise_conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 1, 3, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        inputs = [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((3, 1, 3, 3))]
        assert check_function(lambda x, w: ops.depthwise_conv2d(x, w, padding=1), inputs) < 1e-4

    def test_depthwise_pointwise_parameter_count(self):
        rng = np.random.default_rng(4)
        cin, cout = 6, 10
        dw = Conv2d(cin, cin, 3, rng, padding=1, groups=cin)
        pw = Conv2d(cin, cout, 1, rng)
        assert dw.num_parameters() + pw.num_parameters() == cin * 9 + cin * cout + cin + cout


class TestDeformConv:
    @pytest.mark.parametrize("dilation", [1, 2])
    def test_zero_offsets_equal_conv(self, dilation):
        rng = np.random.default_rng(dilation)
        x = rng.standard_normal((2, 3, 7, 7)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        off = np.zeros((2, 18, 7, 7), np.float32)
        out = ops.deform_conv2d(Tensor(x), Tensor(off), Tensor(w), padding=dilation, dilation=dilation)
        ref = ops.conv2d(Tensor(x), Tensor(w), padding=dilation, dilation=dilation)
        assert np.abs(out.numpy() - ref.numpy()).max() < 1e-6

    def test_unit_offset_translates(self):
        # identity kernel (center tap only) sampling one pixel to the right
        x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        off = np.zeros((1, 18, 5, 5))
        off[:, 1::2] = 1.0
        out = ops.deform_conv2d(Tensor(x), Tensor(off), Tensor(w), padding=1).numpy()[0, 0]
        npt.assert_allclose(out[:, :-1], x[0, 0, :, 1:], atol=1e-12)
        npt.assert_array_equal(out[:, -1], 0.0)

    def test_half_pixel_offset_averages_neighbors(self):
        x = np.random.default_rng(1).standard_normal((1, 1, 4, 4))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        off = np.zeros((1, 18, 4, 4))
        off[:, 1::2] = 0.5
        out = ops.deform_conv2d(Tensor(x), Tensor(off), Tensor(w), padding=1).numpy()[0, 0]
        npt.assert_allclose(out[:, :-1], 0.5 * (x[0, 0, :, :-1] + x[0, 0, :, 1:]), atol=1e-12)
        for i in range(4):
            assert out[i, 3] == pytest.approx(bilinear_sample(x[0, 0], i, 3.5))

    def test_random_offsets_match_pointwise_bilinear_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        off = rng.uniform(-2.5, 2.5, (2, 18, 5, 5))
        out = ops.deform_conv2d(Tensor(x), Tensor(off), Tensor(w), padding=1).numpy()
        npt.assert_allclose(out, direct_deform(x, off, w), atol=1e-10)

    def test_offset_channels_checked(self):
        with pytest.raises(ShapeError, match="18"):
            ops.deform_conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.zeros((1, 16, 4, 4))),
                              Tensor(np.ones((1, 1, 3, 3))), padding=1)

    def test_gradients_reach_input_weight_and_offsets(self):
        rng = np.random.default_rng(3)
        frac = rng.uniform(0.2, 0.8, (1, 18, 4, 4)) + rng.integers(-1, 2, (1, 18, 4, 4))
        inputs = [rng.standard_normal((1, 2, 4, 4)), frac, rng.standard_normal((2, 2, 3, 3))]
        assert check_function(lambda x, o, w: ops.deform_conv2d(x, o, w, padding=1), inputs) < 1e-4


class TestBatchNorm:
    def test_training_output_is_centered(self):
        x = np.random.default_rng(0).standard_normal((4, 3, 5, 5)).astype(np.float32) * 3 + 2
        st_ = ops.BatchNormState.create(3)
        out = ops.batch_norm(Tensor(x), st_).numpy()
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5

    def test_eval_with_unit_stats_is_affine(self):
        x = np.random.default_rng(1).standard_normal((2, 2, 3, 3))
        st_ = ops.BatchNormState.create(2)
        st_.gamma = Tensor(np.array([2.0, 3.0]))
        st_.beta = Tensor(np.array([0.5, -1.0]))
        st_.training = False
        out = ops.batch_norm(Tensor(x), st_).numpy()
        scale = np.array([2.0, 3.0]) / np.sqrt(1 + 1e-5)
        npt.assert_allclose(out, x * scale[None, :, None, None] + np.array([0.5, -1.0])[None, :, None, None],
                            rtol=1e-6, atol=1e-6)

    def test_running_stats_follow_ema(self):
        rng = np.random.default_rng(2)
        st_ = ops.BatchNormState.create(2, momentum=0.1)
        mean, var = np.zeros(2), np.ones(2)
        for _ in range(3):
            x = rng.standard_normal((3, 2, 4, 4)) * 2 + 1
            ops.batch_norm(Tensor(x.astype(np.float32)), st_)
            xs = x.astype(np.float32).astype(np.float64)
            m = xs.shape[0] * xs.shape[2] * xs.shape[3]
            mean = 0.9 * mean + 0.1 * xs.mean(axis=(0, 2, 3))
            var = 0.9 * var + 0.1 * xs.var(axis=(0, 2, 3)) * m / (m - 1)
        npt.assert_allclose(st_.running_mean, mean, rtol=1e-6)
        npt.assert_allclose(st_.running_var, var, rtol=1e-6)

    def test_eval_does_not_touch_running_stats(self):
        st_ = ops.BatchNormState.create(2)
        st_.training = False
        ops.batch_norm(Tensor(np.ones((1, 2, 2, 2)) * 5), st_)
        npt.assert_array_equal(st_.running_mean, 0)
        npt.assert_array_equal(st_.running_var, 1)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.batch_norm(Tensor(np.ones((1, 3, 2, 2))), ops.BatchNormState.create(2))


class TestActivations:
    def test_leaky_relu_values(self):
        out = ops.leaky_relu(Tensor(np.array([0.0, -1.0, 2.0])), 0.01).numpy()
        npt.assert_allclose(out, [0.0, -0.01, 2.0], rtol=1e-6)

    def test_gelu_zero(self):
        assert ops.gelu(Tensor(np.zeros(3))).numpy().tolist() == [0.0, 0.0, 0.0]

    def test_sigmoid_saturates_without_overflow(self):
        out = ops.sigmoid(Tensor(np.array([-1e4, 0.0, 1e4]))).numpy()
        npt.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_gradients_away_from_kink(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.01, 2, (3, 4)) * rng.choice([-1, 1], (3, 4))
        assert check_function(lambda t: ops.leaky_relu(t, 0.01), [x]) < 1e-4
        assert check_function(ops.gelu, [x]) < 1e-4


class TestResampling:
    def test_nearest_2x(self):
        out = ops.upsample_nearest2x(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).numpy()[0, 0]
        npt.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_bilinear_same_size_is_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 2, 5, 3))
        npt.assert_allclose(ops.bilinear_resize(Tensor(x), 5, 3).numpy(), x, atol=1e-12)

    def test_bilinear_2x_keeps_a_ramp_on_the_interior(self):
        ramp = np.tile(np.arange(6.0), (6, 1))[None, None]
        out = ops.bilinear_resize(Tensor(ramp), 12, 12).numpy()[0, 0]
        # align-corners-false: output column j samples source coordinate (j + 0.5) / 2 - 0.5
        expected = (np.arange(12) + 0.5) / 2 - 0.5
        npt.assert_allclose(out[:, 1:-1], np.tile(expected[1:-1], (12, 1)), atol=1e-6)

    def test_zero_target_size_rejected(self):
        with pytest.raises(ValueError):
            ops.bilinear_resize(Tensor(np.ones((1, 1, 2, 2))), 0, 4)

    def test_depth_to_space_layout(self):
        x = np.arange(8.0).reshape(1, 4, 1, 2)
        out = ops.depth_to_space(Tensor(x), 2).numpy()[0, 0]
        # channel (dy, dx) lands at offset (dy, dx) inside each 2x2 block
        npt.assert_array_equal(out, [[0, 2, 1, 3], [4, 6, 5, 7]])

    def test_replicate_padding(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = ops.pad2d(Tensor(x), (1, 0, 0, 1), mode="replicate").numpy()[0, 0]
        npt.assert_array_equal(out, [[1, 2, 2], [1, 2, 2], [3, 4, 4]])

    def test_resampling_gradients(self):
        x = np.random.default_rng(1).standard_normal((1, 2, 3, 3))
        assert check_function(lambda t: ops.bilinear_resize(t, 7, 5), [x]) < 1e-4
        assert check_function(ops.upsample_nearest2x, [x]) < 1e-4
