"""Hierarchical windowed-Transformer encoder emitting one skip tensor per stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import MWABlockPair
from .config import ModelConfig
from .module import LayerNorm, Linear, Module, ModuleList, Parameter, trunc_normal
from .tensor import ShapeError, Tensor, concat


class PatchEmbed(Module):
    """Non-overlapping ``p x p`` patches projected to ``C1`` (a stride-``p`` conv), then layer norm."""

    def __init__(self, in_ch: int, dim: int, patch: int, rng: np.random.Generator):
        self.patch = patch
        self.weight = Parameter(trunc_normal(rng, (dim, in_ch, patch, patch)))
        self.bias = Parameter(np.zeros(dim, np.float32))
        self.norm = LayerNorm(dim)

    def forward(self, image: Tensor) -> Tensor:
        b, _, h, w = image.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
        y = ops.conv2d(image, self.weight, self.bias, stride=p)
        c = y.shape[1]
        y = y.reshape(b, c, -1).permute(0, 2, 1)
        return self.norm(y)


def patch_embed(image: Tensor, embed: PatchEmbed) -> Tensor:
    return embed(image)


class PatchMerging(Module):
    """Concatenate each 2x2 token neighborhood (4C), layer-norm, project to 2C."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor, hw: tuple[int, int]) -> Tensor:
        return self.reduction(self.norm(self.gather(x, hw)))

    @staticmethod
    def gather(x: Tensor, hw: tuple[int, int]) -> Tensor:
        """``[B, h*w, C]`` -> ``[B, (h/2)*(w/2), 4C]`` neighborhood concatenation."""
        b, n, c = x.shape
        h, w = hw
        if n != h * w:
            raise ShapeError(f"{n} tokens cannot form a {h}x{w} grid")
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs even spatial dims, got {h}x{w}")
        g = x.reshape(b, h, w, c)
        # (row parity, col parity) order: (0,0), (1,0), (0,1), (1,1)
        parts = [g[:, 0::2, 0::2, :], g[:, 1::2, 0::2, :], g[:, 0::2, 1::2, :], g[:, 1::2, 1::2, :]]
        return concat(parts, axis=-1).reshape(b, (h // 2) * (w // 2), 4 * c)


@dataclass
class EncoderOutput:
    """Per-stage token tensors ``[B, L_i, C_i]`` with their square side lengths."""

    skips: list[Tensor]
    resolutions: list[int]

    @property
    def bottleneck(self) -> Tensor:
        return self.skips[-1]

    def as_map(self, i: int) -> Tensor:
        """Skip ``i`` as an NCHW feature map."""
        t = self.skips[i]
        b, n, c = t.shape
        r = self.resolutions[i]
        return t.permute(0, 2, 1).reshape(b, c, r, r)


class Stage(Module):
    def __init__(self, dim: int, depth: int, heads: int, res: int, cfg: ModelConfig, rng):
        self.pairs = ModuleList(
            MWABlockPair(dim, heads, (res, res), cfg.window_size, rng, cfg.effn_ratio, cfg.use_effn)
            for _ in range(depth // 2)
        )

    def forward(self, x: Tensor) -> Tensor:
        for pair in self.pairs:
            x = pair(x)
        return x


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.in_channels, cfg.stage_widths[0], cfg.patch_size, rng)
        res = cfg.stage_resolutions()
        self.stages = ModuleList()
        self.merges = ModuleList()
        for i, (dim, depth, heads) in enumerate(
            zip(cfg.stage_widths, cfg.stage_depths, cfg.heads_per_stage)
        ):
            self.stages.append(Stage(dim, depth, heads, res[i], cfg, rng))
            if i < 3:
                self.merges.append(PatchMerging(dim, rng))

    def forward(self, image: Tensor) -> EncoderOutput:
        cfg = self.cfg
        if image.ndim != 4 or image.shape[1:] != (cfg.in_channels, cfg.img_size, cfg.img_size):
            raise ShapeError(
                f"encoder expects [B, {cfg.in_channels}, {cfg.img_size}, {cfg.img_size}], "
                f"got {image.shape}"
            )
        res = cfg.stage_resolutions()
        x = self.patch_embed(image)
        skips = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            skips.append(x)
            if i < 3:
                x = self.merges[i](x, (res[i], res[i]))
        return EncoderOutput(skips, res)


def encode(image: Tensor, encoder: Encoder) -> EncoderOutput:
    return encoder(image)

