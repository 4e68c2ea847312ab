"""Neural-network primitives on NCHW tensors.

Convolutions use cross-correlation (no kernel flip) and are computed by
gathering kernel taps into a column buffer and contracting with the weight
matrix. Deformable convolution gathers its taps by bilinear sampling at
per-location fractional offsets; samples falling outside the map read zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .tensor import Function, ShapeError, Tensor

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    extent = (k - 1) * dilation + 1
    span = size + 2 * padding - extent
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv: input {size} with kernel {k}, stride {stride}, padding {padding}, "
            f"dilation {dilation} gives a non-integer output size"
        )
    return span // stride + 1


def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    """Column buffer ``[C, kh, kw, B, Ho, Wo]`` (reshapes to ``[C*kh*kw, B*Ho*Wo]``)."""
    b, c = xp.shape[:2]
    src = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            cols[:, i, j] = src[
                :, :, y0:y0 + stride * (ho - 1) + 1:stride, x0:x0 + stride * (wo - 1) + 1:stride
            ]
    return cols


def _col2im(cols, padded_shape, stride, dilation):
    c, kh, kw, b, ho, wo = cols.shape
    bp, cp, hp, wp = padded_shape
    xp = np.zeros((cp, bp, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            xp[
                :, :, y0:y0 + stride * (ho - 1) + 1:stride, x0:x0 + stride * (wo - 1) + 1:stride
            ] += cols[:, i, j]
    return xp.transpose(1, 0, 2, 3)


def _tap_slices(kh, kw, stride, dilation, ho, wo):
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            yield i * kw + j, (
                slice(None),
                slice(None),
                slice(y0, y0 + stride * (ho - 1) + 1, stride),
                slice(x0, x0 + stride * (wo - 1) + 1, stride),
            )


def _to_nchw(out, bsz, ho, wo):
    """``[O, B*Ho*Wo]`` -> contiguous ``[B, O, Ho, Wo]``."""
    return np.ascontiguousarray(out.reshape(out.shape[0], bsz, ho, wo).transpose(1, 0, 2, 3))


def _from_nchw(g):
    """``[B, O, Ho, Wo]`` -> ``[O, B*Ho*Wo]``."""
    return np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(g.shape[1], -1)


class Conv2d(Function):
    name = "conv2d"

    @staticmethod
    def forward(ctx, x, w, b, stride, padding, dilation, groups):
        bsz, cin, h, wd = x.shape
        cout, cg, kh, kw = w.shape
        ho = conv_output_size(h, kh, stride, padding, dilation)
        wo = conv_output_size(wd, kw, stride, padding, dilation)
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        og = cout // groups
        ctx.geom = (xp.shape, padding, stride, dilation, groups, x.shape, ho, wo)
        if groups > 1 and cg == 1 and og == 1:
            # depth-wise: accumulate shifted copies, no column buffer
            taps = w.reshape(cout, kh * kw)
            out = np.zeros((bsz, cout, ho, wo), dtype=x.dtype)
            for t, sl in _tap_slices(kh, kw, stride, dilation, ho, wo):
                out += xp[sl] * taps[:, t].reshape(1, cout, 1, 1)
            ctx.save(xp, w)
        else:
            cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
            k = cg * kh * kw
            if groups == 1:
                out = w.reshape(cout, k) @ cols.reshape(k, -1)
            else:
                out = np.matmul(w.reshape(groups, og, k), cols.reshape(groups, k, -1))
            out = _to_nchw(out.reshape(cout, -1), bsz, ho, wo)
            ctx.save(cols, w)
        if b is not None:
            out += b.reshape(1, cout, 1, 1)
        return out

    @staticmethod
    def backward(ctx, grad):
        padded_shape, padding, stride, dilation, groups, in_shape, ho, wo = ctx.geom
        w = ctx.saved[1]
        cout, cg, kh, kw = w.shape
        og = cout // groups
        gx = gw = gb = None
        if groups > 1 and cg == 1 and og == 1:
            xp = ctx.saved[0]
            taps = w.reshape(cout, kh * kw)
            gtaps = np.empty_like(taps) if ctx.needs_grad[1] else None
            gxp = np.zeros(padded_shape, dtype=grad.dtype) if ctx.needs_grad[0] else None
            for t, sl in _tap_slices(kh, kw, stride, dilation, ho, wo):
                if gtaps is not None:
                    gtaps[:, t] = (grad * xp[sl]).sum(axis=(0, 2, 3))
                if gxp is not None:
                    gxp[sl] += grad * taps[:, t].reshape(1, cout, 1, 1)
            if gtaps is not None:
                gw = gtaps.reshape(w.shape)
        else:
            cols = ctx.saved[0]
            k = cg * kh * kw
            g = _from_nchw(grad)
            if ctx.needs_grad[1]:
                if groups == 1:
                    gw = g @ cols.reshape(k, -1).T
                else:
                    gw = np.matmul(
                        g.reshape(groups, og, -1), np.swapaxes(cols.reshape(groups, k, -1), 1, 2)
                    )
                gw = gw.reshape(w.shape)
            gxp = None
            if ctx.needs_grad[0]:
                if groups == 1:
                    gcols = w.reshape(cout, k).T @ g
                else:
                    gcols = np.matmul(np.swapaxes(w.reshape(groups, og, k), 1, 2), g.reshape(groups, og, -1))
                gxp = _col2im(gcols.reshape(cols.shape), padded_shape, stride, dilation)
        if ctx.needs_grad[0]:
            if padding:
                gxp = gxp[:, :, padding:padding + in_shape[2], padding:padding + in_shape[3]]
            gx = np.ascontiguousarray(gxp)
        if ctx.needs_grad[2]:
            gb = grad.sum(axis=(0, 2, 3))
        return gx, gw, gb


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {weight.shape}")
    if dilation < 1 or stride < 1 or padding < 0 or groups < 1:
        raise ValueError("conv2d: stride and dilation must be >= 1, padding >= 0, groups >= 1")
    cin = x.shape[1]
    cout, cg = weight.shape[:2]
    if cin % groups or cout % groups or cg * groups != cin:
        raise ShapeError(
            f"conv2d: input has {cin} channels but weight {weight.shape} with groups={groups}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    return Conv2d.apply(
        x, weight, bias, stride=stride, padding=padding, dilation=dilation, groups=groups
    )


def depthwise_conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0, dilation: int = 1
) -> Tensor:
    """One filter per channel: ``weight`` is ``[C, 1, kh, kw]`` for a ``C``-channel input."""
    c = x.shape[1]
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: weight {weight.shape} is not one filter per channel of {c}")
    return conv2d(x, weight, bias, padding=padding, dilation=dilation, groups=c)


# ---------------------------------------------------------------------------
# deformable convolution


def _bilinear_taps(x, offsets, kh, kw, stride, padding, dilation, ho, wo):
    """Sample positions and corner weights for every (tap, output location).

    Returns flat corner indices ``[4, B, K, N]``, corner weights (zeroed when the
    corner falls outside the map) and the fractional parts used for the
    offset gradient.
    """
    bsz, _, h, w = x.shape
    k = kh * kw
    ty, tx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    base_y = (oy.reshape(1, -1) * stride - padding) + (ty.reshape(-1, 1) * dilation)
    base_x = (ox.reshape(1, -1) * stride - padding) + (tx.reshape(-1, 1) * dilation)
    off = offsets.reshape(bsz, k, 2, ho * wo)
    py = base_y[None].astype(x.dtype) + off[:, :, 0]
    px = base_x[None].astype(x.dtype) + off[:, :, 1]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    # non-finite positions get an in-range placeholder and NaN weights so the NaN propagates
    bad = ~(np.isfinite(py) & np.isfinite(px))
    y0 = np.where(bad, 0, y0).astype(np.int64)
    x0 = np.where(bad, 0, x0).astype(np.int64)
    corners = ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1))
    wts = ((1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx)
    idx = np.empty((4,) + py.shape, dtype=np.int64)
    weights = np.empty((4,) + py.shape, dtype=x.dtype)
    valid = np.empty((4,) + py.shape, dtype=bool)
    for c, ((cy, cx), cw) in enumerate(zip(corners, wts)):
        ok = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
        valid[c] = ok
        idx[c] = np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)
        weights[c] = np.where(ok | bad, cw, 0)
    return idx, weights, valid, ly, lx


class DeformConv2d(Function):
    name = "deform_conv2d"

    @staticmethod
    def forward(ctx, x, offsets, w, b, stride, padding, dilation):
        bsz, cin, h, wd = x.shape
        cout, _, kh, kw = w.shape
        ho = conv_output_size(h, kh, stride, padding, dilation)
        wo = conv_output_size(wd, kw, stride, padding, dilation)
        if offsets.shape != (bsz, 2 * kh * kw, ho, wo):
            raise ShapeError(
                f"deform_conv2d: offsets {offsets.shape} must be {(bsz, 2 * kh * kw, ho, wo)}"
            )
        idx, weights, valid, ly, lx = _bilinear_taps(
            x, offsets, kh, kw, stride, padding, dilation, ho, wo
        )
        k = kh * kw
        n = ho * wo
        flat = x.reshape(bsz, cin, h * wd)
        # corner values [4, C, K, B, N]
        vals = np.empty((4, cin, k, bsz, n), dtype=x.dtype)
        for bi in range(bsz):
            vals[:, :, :, bi] = flat[bi][:, idx[:, bi]].transpose(1, 0, 2, 3)
        wt = weights.transpose(0, 2, 1, 3)[:, None]
        cols = (vals * wt).sum(axis=0)
        out = w.reshape(cout, cin * k) @ cols.reshape(cin * k, bsz * n)
        out = _to_nchw(out, bsz, ho, wo)
        if b is not None:
            out += b.reshape(1, cout, 1, 1)
        ctx.save(cols, vals, idx, weights, valid, ly, lx, w)
        ctx.in_shape = x.shape
        return out

    @staticmethod
    def backward(ctx, grad):
        cols, vals, idx, weights, valid, ly, lx, w = ctx.saved
        bsz, cin, h, wd = ctx.in_shape
        cout, _, kh, kw = w.shape
        k = kh * kw
        g = _from_nchw(grad)
        gx = goff = gw = gb = None
        if ctx.needs_grad[2]:
            gw = (g @ cols.reshape(cin * k, -1).T).reshape(w.shape)
        if ctx.needs_grad[3]:
            gb = grad.sum(axis=(0, 2, 3))
        if ctx.needs_grad[0] or ctx.needs_grad[1]:
            gcols = (w.reshape(cout, cin * k).T @ g).reshape(cols.shape)
        if ctx.needs_grad[0]:
            gx = np.empty((bsz, cin, h * wd), dtype=grad.dtype)
            chan = (np.arange(cin) * (h * wd))[:, None, None]
            for bi in range(bsz):
                # [4, C, K, N] flat indices into the C*H*W map of sample bi
                where = idx[:, bi][:, None] + chan[None]
                contrib = gcols[:, :, bi][None] * weights[:, bi][:, None]
                gx[bi] = np.bincount(
                    where.reshape(-1), weights=contrib.reshape(-1), minlength=cin * h * wd
                ).reshape(cin, h * wd)
            gx = gx.reshape(ctx.in_shape)
        if ctx.needs_grad[1]:
            # derivative of each corner weight with respect to the sample position
            dwy = (-(1 - lx), -lx, 1 - lx, lx)
            dwx = (-(1 - ly), 1 - ly, -ly, ly)
            sy = np.zeros(cols.shape, dtype=grad.dtype)
            sx = np.zeros(cols.shape, dtype=grad.dtype)
            for c in range(4):
                v = np.where(valid[c].transpose(1, 0, 2)[None], vals[c], 0)
                sy += v * dwy[c].transpose(1, 0, 2)[None]
                sx += v * dwx[c].transpose(1, 0, 2)[None]
            goy = (gcols * sy).sum(axis=0).transpose(1, 0, 2)
            gox = (gcols * sx).sum(axis=0).transpose(1, 0, 2)
            goff = np.stack([goy, gox], axis=2).reshape(bsz, 2 * k, *grad.shape[2:])
        return gx, goff, gw, gb


def deform_conv2d(
    x: Tensor,
    offsets: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Deformable convolution with offsets laid out as ``[B, 2*kh*kw, Ho, Wo]``.

    Channel ``2t`` holds the vertical and ``2t+1`` the horizontal displacement
    (in pixels) of kernel tap ``t``, taps enumerated row-major.
    """
    cout, cin_w, kh, kw = weight.shape
    if x.shape[1] != cin_w:
        raise ShapeError(f"deform_conv2d: input has {x.shape[1]} channels, weight expects {cin_w}")
    if offsets.ndim != 4 or offsets.shape[1] != 2 * kh * kw:
        raise ShapeError(
            f"deform_conv2d: offset field needs {2 * kh * kw} channels for a {kh}x{kw} kernel, "
            f"got shape {offsets.shape}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"deform_conv2d: bias {bias.shape} does not match {cout} output channels")
    return DeformConv2d.apply(
        x, offsets, weight, bias, stride=stride, padding=padding, dilation=dilation
    )


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    """Affine parameters plus running statistics for one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, np.float32), requires_grad=True),
            beta=Tensor(np.zeros(channels, np.float32), requires_grad=True),
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
            momentum=momentum,
            eps=eps,
        )


class BatchNormTrain(Function):
    name = "batch_norm_train"

    @staticmethod
    def forward(ctx, x, gamma, beta, eps):
        axes = (0, 2, 3)
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = xc * inv
        ctx.save(xhat, inv, gamma)
        c = x.shape[1]
        return xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)

    @staticmethod
    def backward(ctx, grad):
        xhat, inv, gamma = ctx.saved
        axes = (0, 2, 3)
        c = grad.shape[1]
        m = grad.size // c
        ggamma = (grad * xhat).sum(axis=axes)
        gbeta = grad.sum(axis=axes)
        gxh = grad * gamma.reshape(1, c, 1, 1)
        gx = inv / m * (
            m * gxh
            - gxh.sum(axis=axes, keepdims=True)
            - xhat * (gxh * xhat).sum(axis=axes, keepdims=True)
        )
        return gx, ggamma, gbeta


class BatchNormEval(Function):
    name = "batch_norm_eval"

    @staticmethod
    def forward(ctx, x, gamma, beta, mean, var, eps):
        c = x.shape[1]
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, c, 1, 1)
        xhat = (x - mean.astype(x.dtype).reshape(1, c, 1, 1)) * inv
        ctx.save(xhat, inv, gamma)
        return xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)

    @staticmethod
    def backward(ctx, grad):
        xhat, inv, gamma = ctx.saved
        c = grad.shape[1]
        return (
            grad * gamma.reshape(1, c, 1, 1) * inv,
            (grad * xhat).sum(axis=(0, 2, 3)),
            grad.sum(axis=(0, 2, 3)),
        )


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    Training mode normalizes with batch statistics and folds them into the
    running estimates as ``running = (1 - momentum) * running + momentum * batch``
    (unbiased variance for the running estimate). Eval mode uses the running
    estimates only.
    """
    c = state.gamma.shape[0]
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"batch_norm: input {x.shape} does not have {c} channels")
    if state.training:
        axes = (0, 2, 3)
        m = x.size // c
        bmean = x.data.mean(axis=axes, dtype=np.float64)
        bvar = x.data.var(axis=axes, dtype=np.float64)
        unbiased = bvar * m / max(m - 1, 1)
        mom = state.momentum
        dt = state.running_mean.dtype
        state.running_mean[...] = ((1 - mom) * state.running_mean + mom * bmean).astype(dt)
        state.running_var[...] = ((1 - mom) * state.running_var + mom * unbiased).astype(dt)
        return BatchNormTrain.apply(x, state.gamma, state.beta, eps=state.eps)
    return BatchNormEval.apply(
        x, state.gamma, state.beta, mean=state.running_mean, var=state.running_var, eps=state.eps
    )


# ---------------------------------------------------------------------------
# activations


class Gelu(Function):
    name = "gelu"

    @staticmethod
    def forward(ctx, x):
        cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_SQRT_HALF)))
        ctx.save(x, cdf)
        return (x * cdf).astype(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        x, cdf = ctx.saved
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((grad * (cdf + x * pdf)).astype(grad.dtype),)


class LeakyRelu(Function):
    name = "leaky_relu"

    @staticmethod
    def forward(ctx, x, slope):
        pos = x >= 0
        ctx.save(pos)
        ctx.slope = slope
        return np.where(pos, x, x * x.dtype.type(slope))

    @staticmethod
    def backward(ctx, grad):
        (pos,) = ctx.saved
        return (np.where(pos, grad, grad * grad.dtype.type(ctx.slope)),)


class Sigmoid(Function):
    name = "sigmoid"

    @staticmethod
    def forward(ctx, x):
        y = _stable_sigmoid(x)
        ctx.save(y)
        return y

    @staticmethod
    def backward(ctx, grad):
        (y,) = ctx.saved
        return (grad * y * (1 - y),)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return LeakyRelu.apply(x, slope=slope)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


# ---------------------------------------------------------------------------
# dense layers, padding, resampling


class Linear(Function):
    name = "linear"

    @staticmethod
    def forward(ctx, x, w, b):
        x2 = x.reshape(-1, x.shape[-1])
        out = x2 @ w.T
        if b is not None:
            out += b
        ctx.save(x2, w)
        ctx.in_shape = x.shape
        return out.reshape(*x.shape[:-1], w.shape[0])

    @staticmethod
    def backward(ctx, grad):
        x2, w = ctx.saved
        g2 = grad.reshape(-1, grad.shape[-1])
        gx = (g2 @ w).reshape(ctx.in_shape) if ctx.needs_grad[0] else None
        gw = g2.T @ x2 if ctx.needs_grad[1] else None
        gb = g2.sum(axis=0) if ctx.needs_grad[2] else None
        return gx, gw, gb


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    return Linear.apply(x, weight, bias)


class Pad2d(Function):
    name = "pad2d"

    @staticmethod
    def forward(ctx, x, pads, mode, axes):
        top, bottom, left, right = pads
        ay, ax = axes
        ctx.pads, ctx.mode, ctx.axes, ctx.shape = pads, mode, axes, x.shape
        if mode == "zeros":
            width = [(0, 0)] * x.ndim
            width[ay] = (top, bottom)
            width[ax] = (left, right)
            return np.pad(x, width)
        iy = np.clip(np.arange(-top, x.shape[ay] + bottom), 0, x.shape[ay] - 1)
        ix = np.clip(np.arange(-left, x.shape[ax] + right), 0, x.shape[ax] - 1)
        ctx.index = (iy, ix)
        return np.take(np.take(x, iy, axis=ay), ix, axis=ax)

    @staticmethod
    def backward(ctx, grad):
        top, bottom, left, right = ctx.pads
        ay, ax = ctx.axes
        if ctx.mode == "zeros":
            index = [slice(None)] * grad.ndim
            index[ay] = slice(top, top + ctx.shape[ay])
            index[ax] = slice(left, left + ctx.shape[ax])
            return (np.ascontiguousarray(grad[tuple(index)]),)
        iy, ix = ctx.index
        gy_shape = list(grad.shape)
        gy_shape[ax] = ctx.shape[ax]
        gy = np.zeros(gy_shape, dtype=grad.dtype)
        _add_along(gy, ix, grad, ax)
        gx = np.zeros(ctx.shape, dtype=grad.dtype)
        _add_along(gx, iy, gy, ay)
        return (gx,)


def _add_along(dst, index, src, axis):
    dst_m = np.moveaxis(dst, axis, 0)
    np.add.at(dst_m, index, np.moveaxis(src, axis, 0))


def pad2d(x: Tensor, pads, mode: str = "zeros", axes=(-2, -1)) -> Tensor:
    """Pad two spatial axes by ``(top, bottom, left, right)`` with zeros or edge replication."""
    if mode not in ("zeros", "replicate"):
        raise ValueError(f"unknown padding mode {mode!r}")
    pads = tuple(int(p) for p in pads)
    if any(p < 0 for p in pads):
        raise ValueError("padding must be non-negative")
    if not any(pads):
        return x
    axes = tuple(a % x.ndim for a in axes)
    return Pad2d.apply(x, pads=pads, mode=mode, axes=axes)


class UpsampleNearest2x(Function):
    name = "upsample_nearest2x"

    @staticmethod
    def forward(ctx, x):
        return x.repeat(2, axis=-2).repeat(2, axis=-1)

    @staticmethod
    def backward(ctx, grad):
        *lead, h2, w2 = grad.shape
        return (grad.reshape(*lead, h2 // 2, 2, w2 // 2, 2).sum(axis=(-3, -1)),)


def upsample_nearest2x(x: Tensor) -> Tensor:
    return UpsampleNearest2x.apply(x)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix ``[n_out, n_in]`` for the align-corners-false convention."""
    scale_ = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale_ - 0.5
    src = np.clip(src, 0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


class BilinearResize(Function):
    name = "bilinear_resize"

    @staticmethod
    def forward(ctx, x, size):
        ry = bilinear_matrix(x.shape[-2], size[0], x.dtype)
        rx = bilinear_matrix(x.shape[-1], size[1], x.dtype)
        ctx.save(ry, rx)
        return np.ascontiguousarray(np.matmul(np.matmul(ry, x), rx.T))

    @staticmethod
    def backward(ctx, grad):
        ry, rx = ctx.saved
        return (np.ascontiguousarray(np.matmul(np.matmul(ry.T, grad), rx)),)


def bilinear_resize(x: Tensor, height: int, width: int) -> Tensor:
    if height < 1 or width < 1:
        raise ValueError(f"bilinear_resize: target size must be positive, got {height}x{width}")
    return BilinearResize.apply(x, size=(int(height), int(width)))


def depth_to_space(x: Tensor, factor: int) -> Tensor:
    """Rearrange ``[B, C*f*f, H, W]`` into ``[B, C, H*f, W*f]``."""
    b, c, h, w = x.shape
    if c % (factor * factor):
        raise ShapeError(f"depth_to_space: {c} channels not divisible by {factor}^2")
    oc = c // (factor * factor)
    y = x.reshape(b, oc, factor, factor, h, w).permute(0, 1, 4, 2, 5, 3)
    return y.reshape(b, oc, h * factor, w * factor)
