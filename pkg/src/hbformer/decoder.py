"""Multi-scale feature-fusion decoder, the plain windowed decoder, and the segmentation head.

Feature maps here are NCHW. Every MFF stage upsamples the map from below,
concatenates the encoder skip of the same resolution and refines the result
with depth-wise convolutions, the deformable pyramid block and two gates.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .attention import MWABlockPair
from .config import ModelConfig
from .encoder import EncoderOutput
from .module import (
    BatchNorm2d,
    Conv2d,
    ConvBnAct,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
    he_normal,
)
from .tensor import ShapeError, Tensor, concat

LEAKY_SLOPE = 0.01


class DSPPBranch(Module):
    """Deformable 3x3 (offsets from a zero-initialized 3x3 conv), then a dilated 3x3, BN, LeakyReLU."""

    def __init__(self, channels: int, rate: int, rng: np.random.Generator):
        self.rate = rate
        self.offset = Conv2d(channels, 18, 3, rng, padding=1, zero_init=True)
        self.deform_weight = Parameter(he_normal(rng, (channels, channels, 3, 3), channels * 9))
        self.dilated = Conv2d(channels, channels, 3, rng, padding=rate, dilation=rate, bias=False)
        self.bn = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.deform_conv2d(x, self.offset(x), self.deform_weight, padding=1)
        return ops.leaky_relu(self.bn(self.dilated(y)), LEAKY_SLOPE)


class MedDSPP(Module):
    """Four parallel branches at different dilation rates, fused 1x1, plus the input."""

    def __init__(self, channels: int, rates, rng: np.random.Generator):
        self.branches = ModuleList(DSPPBranch(channels, r, rng) for r in rates)
        self.fuse = Conv2d(len(rates) * channels, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        ys = [branch(x) for branch in self.branches]
        return x + self.fuse(concat(ys, axis=1))


def med_dspp(x: Tensor, block: MedDSPP) -> Tensor:
    if x.ndim != 4 or x.shape[1] != block.fuse.weight.shape[0]:
        raise ShapeError(f"med_dspp: input {x.shape} does not match {block.fuse.weight.shape[0]} channels")
    return block(x)


class ChannelAttention(Module):
    """Squeeze-excite gate: global average pool, 1x1 reduce, LeakyReLU, 1x1 expand, sigmoid."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        hidden = max(channels // reduction, 1)
        self.reduce = Conv2d(channels, hidden, 1, rng)
        self.expand = Conv2d(hidden, channels, 1, rng)

    def gate(self, x: Tensor) -> Tensor:
        pooled = x.mean(axis=(2, 3), keepdims=True)
        return ops.sigmoid(self.expand(ops.leaky_relu(self.reduce(pooled), LEAKY_SLOPE)))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class SpatialAttention(Module):
    """Single-channel sigmoid map from a depth-wise dilated 3x3 (rate 2) and a 1x1 projection.

    The depth-wise conv pads by edge replication so a constant map yields a
    constant gate.
    """

    def __init__(self, channels: int, rng: np.random.Generator, dilation: int = 2):
        self.dilation = dilation
        self.dw = Conv2d(channels, channels, 3, rng, dilation=dilation, groups=channels)
        self.proj = Conv2d(channels, 1, 1, rng)

    def gate(self, x: Tensor) -> Tensor:
        d = self.dilation
        y = self.dw(ops.pad2d(x, (d, d, d, d), mode="replicate"))
        return ops.sigmoid(self.proj(y))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class MFFStage(Module):
    def __init__(self, below_ch: int, skip_ch: int, rates, rng: np.random.Generator):
        c = skip_ch
        self.reduce = Conv2d(below_ch + skip_ch, c, 1, rng)
        self.dw1 = ConvBnAct(Conv2d(c, c, 3, rng, padding=1, groups=c), LEAKY_SLOPE)
        self.dw2 = ConvBnAct(Conv2d(c, c, 3, rng, padding=1, groups=c), LEAKY_SLOPE)
        self.dspp = MedDSPP(c, rates, rng)
        self.channel_attn = ChannelAttention(c, rng)
        self.spatial_attn = SpatialAttention(c, rng)

    def forward(self, below: Tensor, skip: Tensor) -> Tensor:
        h, w = skip.shape[2:]
        up = ops.bilinear_resize(below, 2 * below.shape[2], 2 * below.shape[3])
        if up.shape[2:] != (h, w) or up.shape[0] != skip.shape[0]:
            raise ShapeError(f"upsampled map {up.shape} does not match skip {skip.shape}")
        x = self.reduce(concat([up, skip], axis=1))
        x = self.dw2(self.dw1(x))
        x = self.dspp(x)
        return self.spatial_attn(self.channel_attn(x))


class SegHead(Module):
    """Upsample to input resolution, then 1x1 conv to class logits.

    ``expand`` mode is a learned 1x1 expansion followed by depth-to-space
    (every output pixel of a token gets its own projection); ``bilinear`` mode
    interpolates the feature map instead.
    """

    def __init__(self, channels: int, num_classes: int, factor: int, mode: str, rng):
        self.factor = factor
        self.mode = mode
        if mode == "expand":
            self.expand = Conv2d(channels, channels * factor * factor, 1, rng, bias=False)
            self.bn = BatchNorm2d(channels)
        self.classify = Conv2d(channels, num_classes, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        f = self.factor
        if self.mode == "expand":
            y = ops.depth_to_space(self.expand(x), f)
            y = ops.leaky_relu(self.bn(y), LEAKY_SLOPE)
        else:
            y = ops.bilinear_resize(x, x.shape[2] * f, x.shape[3] * f)
        return self.classify(y)


class MFFDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        w = cfg.stage_widths
        self.stages = ModuleList(MFFStage(w[i + 1], w[i], cfg.dspp_rates, rng) for i in (2, 1, 0))
        self.head = SegHead(w[0], cfg.num_classes, cfg.patch_size, cfg.head_upsample, rng)

    def forward(self, enc: EncoderOutput) -> Tensor:
        x = enc.as_map(3)
        for stage, i in zip(self.stages, (2, 1, 0)):
            x = stage(x, enc.as_map(i))
        return self.head(x)


class PatchExpand(Module):
    """Tokens ``[B, h*w, C]`` -> ``[B, 2h*2w, C/2]``: linear to 2C, depth-to-space, layer norm."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.expand = Linear(dim, 2 * dim, rng, bias=False)
        self.norm = LayerNorm(dim // 2)

    def forward(self, x: Tensor, side: int) -> Tensor:
        b, n, c = x.shape
        y = self.expand(x).reshape(b, side, side, 2, 2, c // 2).permute(0, 1, 3, 2, 4, 5)
        return self.norm(y.reshape(b, 4 * n, c // 2))


class PlainStage(Module):
    def __init__(self, below_dim: int, dim: int, heads: int, res: int, cfg: ModelConfig, rng):
        self.up = PatchExpand(below_dim, rng)
        self.concat_back = Linear(2 * dim, dim, rng)
        self.blocks = MWABlockPair(dim, heads, (res, res), cfg.window_size, rng, cfg.effn_ratio, False)

    def forward(self, below: Tensor, below_side: int, skip: Tensor) -> Tensor:
        x = self.up(below, below_side)
        return self.blocks(self.concat_back(concat([x, skip], axis=-1)))


class PlainDecoder(Module):
    """Symmetric windowed-Transformer decoder: patch expanding plus one block pair per stage."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        w = cfg.stage_widths
        res = cfg.stage_resolutions()
        self.stages = ModuleList(
            PlainStage(w[i + 1], w[i], cfg.heads_per_stage[i], res[i], cfg, rng) for i in (2, 1, 0)
        )
        self.norm = LayerNorm(w[0])
        self.head = SegHead(w[0], cfg.num_classes, cfg.patch_size, cfg.head_upsample, rng)

    def forward(self, enc: EncoderOutput) -> Tensor:
        x = enc.bottleneck
        for stage, i in zip(self.stages, (2, 1, 0)):
            x = stage(x, enc.resolutions[i + 1], enc.skips[i])
        x = self.norm(x)
        b, n, c = x.shape
        side = enc.resolutions[0]
        return self.head(x.permute(0, 2, 1).reshape(b, c, side, side))
