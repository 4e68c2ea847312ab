"""Windowed multi-head self-attention blocks with the convolutional feed-forward.

Token maps are ``[B, H, W, C]`` inside this module and ``[B, H*W, C]`` at the
block boundary. A block pair runs a regular-window block followed by a
shifted-window block, each as pre-norm sublayers with residual additions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import ops
from .module import Conv2d, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import ShapeError, Tensor, gather_rows, matmul, roll, softmax, transpose

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowLayout:
    """How an ``H x W`` token grid is cut into ``M x M`` windows."""

    feature_h: int
    feature_w: int
    window_size: int
    shift: int = 0

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window size must be positive")
        if self.shift not in (0, self.window_size // 2):
            raise ValueError(f"shift must be 0 or {self.window_size // 2}, got {self.shift}")

    @classmethod
    def for_stage(cls, h: int, w: int, window_size: int, shifted: bool) -> "WindowLayout":
        """Clamp the window to small grids; grids no larger than a window are not shifted."""
        if min(h, w) <= window_size:
            return cls(h, w, min(h, w), 0)
        return cls(h, w, window_size, window_size // 2 if shifted else 0)

    @property
    def pad_h(self) -> int:
        return -self.feature_h % self.window_size

    @property
    def pad_w(self) -> int:
        return -self.feature_w % self.window_size

    @property
    def padded(self) -> tuple[int, int]:
        return self.feature_h + self.pad_h, self.feature_w + self.pad_w

    @property
    def num_windows(self) -> int:
        hp, wp = self.padded
        return (hp // self.window_size) * (wp // self.window_size)

    @cached_property
    def mask(self) -> np.ndarray:
        return attention_mask(self)


def relative_position_index(m: int) -> np.ndarray:
    """``[M*M, M*M]`` map from a token pair to its row in the ``(2M-1)^2`` bias table."""
    rows, cols = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    r = rows.reshape(-1)
    c = cols.reshape(-1)
    dr = r[:, None] - r[None, :] + m - 1
    dc = c[:, None] - c[None, :] + m - 1
    return dr * (2 * m - 1) + dc


def attention_mask(layout: WindowLayout) -> np.ndarray:
    """``[nW, M*M, M*M]`` additive mask: ``MASK_VALUE`` between tokens from different regions.

    After the cyclic shift, windows on the bottom/right border hold tokens
    that were not adjacent before shifting; each token is labeled with the
    region it came from and only same-region pairs may attend.
    """
    m = layout.window_size
    hp, wp = layout.padded
    n = m * m
    if layout.shift == 0:
        return np.zeros((layout.num_windows, n, n), np.float32)
    s = layout.shift
    labels = np.zeros((hp, wp), np.int64)
    bands = (slice(0, -m), slice(-m, -s), slice(-s, None))
    region = 0
    for hs in bands:
        for ws in bands:
            labels[hs, ws] = region
            region += 1
    win = labels.reshape(hp // m, m, wp // m, m).transpose(0, 2, 1, 3).reshape(-1, n)
    differ = win[:, :, None] != win[:, None, :]
    return np.where(differ, MASK_VALUE, 0.0).astype(np.float32)


def pad_to_windows(x: Tensor, layout: WindowLayout) -> Tensor:
    """Zero-pad ``[B, H, W, C]`` at the bottom/right to multiples of the window size."""
    return ops.pad2d(x, (0, layout.pad_h, 0, layout.pad_w), axes=(1, 2))


def window_partition(x: Tensor, layout: WindowLayout) -> Tensor:
    """``[B, H, W, C]`` -> ``[B*nW, M*M, C]``, windows row-major over the window grid."""
    b, h, w, c = x.shape
    hp, wp = layout.padded
    if (h, w) == (layout.feature_h, layout.feature_w):
        x = pad_to_windows(x, layout)
    elif (h, w) != (hp, wp):
        raise ShapeError(f"map {h}x{w} does not match layout {layout}")
    m = layout.window_size
    x = x.reshape(b, hp // m, m, wp // m, m, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b * layout.num_windows, m * m, c)


def window_reverse(windows: Tensor, layout: WindowLayout, crop: bool = True) -> Tensor:
    """Inverse of :func:`window_partition`; drops the padding unless ``crop`` is false."""
    m = layout.window_size
    hp, wp = layout.padded
    nw = layout.num_windows
    if windows.ndim != 3 or windows.shape[1] != m * m or windows.shape[0] % nw:
        raise ShapeError(f"windows {windows.shape} inconsistent with {nw} windows of {m}x{m}")
    b = windows.shape[0] // nw
    c = windows.shape[2]
    x = windows.reshape(b, hp // m, wp // m, m, m, c).permute(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, hp, wp, c)
    if crop and (layout.pad_h or layout.pad_w):
        x = x[:, : layout.feature_h, : layout.feature_w, :]
    return x


def cyclic_shift(x: Tensor, layout: WindowLayout, inverse: bool = False) -> Tensor:
    """Roll a ``[B, H, W, C]`` map by ``-shift`` (or ``+shift`` when undoing it)."""
    s = layout.shift if inverse else -layout.shift
    if s == 0:
        return x
    return roll(x, (s, s), (1, 2))


def windowed_attention(
    tokens: Tensor,
    qkv: Linear,
    proj: Linear,
    heads: int,
    bias_table: Tensor,
    bias_index: np.ndarray,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Multi-head attention inside each window.

    ``tokens`` is ``[B*nW, N, C]``. Scores are ``q k^T / sqrt(d)`` plus the
    gathered relative-position bias plus the additive mask (``[nW, N, N]``).
    """
    bw, n, c = tokens.shape
    if c % heads:
        raise ShapeError(f"embedding dim {c} not divisible by {heads} heads")
    if bias_index.shape != (n, n) or bias_table.shape[1] != heads:
        raise ShapeError(f"bias table {bias_table.shape} / index {bias_index.shape} do not fit")
    d = c // heads
    qkv_t = qkv(tokens).reshape(bw, n, 3, heads, d).permute(2, 0, 3, 1, 4)
    q = qkv_t[0] * (d ** -0.5)
    k = qkv_t[1]
    v = qkv_t[2]
    scores = matmul(q, transpose(k))
    bias = gather_rows(bias_table, bias_index.reshape(-1)).reshape(n, n, heads).permute(2, 0, 1)
    scores = scores + bias
    if mask is not None and np.any(mask):
        nw = mask.shape[0]
        scores = scores.reshape(bw // nw, nw, heads, n, n)
        scores = scores + Tensor._wrap(mask.astype(scores.dtype).reshape(nw, 1, n, n))
        scores = scores.reshape(bw, heads, n, n)
    attn = softmax(scores, axis=-1)
    out = matmul(attn, v).permute(0, 2, 1, 3).reshape(bw, n, c)
    return proj(out)


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, window_size: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.window_size = window_size
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.bias_table = Parameter(trunc_normal(rng, ((2 * window_size - 1) ** 2, heads)))
        self.bias_index = relative_position_index(window_size)

    def forward(self, windows: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return windowed_attention(
            windows, self.qkv, self.proj, self.heads, self.bias_table, self.bias_index, mask
        )


class FFN(Module):
    """Token-wise linear, GELU, linear."""

    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim * ratio, rng)
        self.fc2 = Linear(dim * ratio, dim, rng)

    def forward(self, x: Tensor, hw: tuple[int, int] | None = None) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class EFFN(Module):
    """Feed-forward with a depth-wise 3x3 and point-wise 1x1 convolution on the token map.

    linear expand -> ``[B, C', H, W]`` -> depth-wise 3x3 -> GELU -> point-wise 1x1
    -> tokens -> linear contract.
    """

    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        hidden = dim * ratio
        self.expand = Linear(dim, hidden, rng)
        self.dwconv = Conv2d(hidden, hidden, 3, rng, padding=1, groups=hidden)
        self.pwconv = Conv2d(hidden, hidden, 1, rng)
        self.contract = Linear(hidden, dim, rng)

    def forward(self, x: Tensor, hw: tuple[int, int]) -> Tensor:
        b, n, _ = x.shape
        h, w = hw
        if n != h * w:
            raise ShapeError(f"EFFN: {n} tokens cannot form a {h}x{w} map")
        y = self.expand(x)
        c = y.shape[-1]
        y = y.permute(0, 2, 1).reshape(b, c, h, w)
        y = self.pwconv(ops.gelu(self.dwconv(y)))
        y = y.reshape(b, c, n).permute(0, 2, 1)
        return self.contract(y)


class MWABlock(Module):
    """One pre-norm attention sublayer plus one pre-norm feed-forward sublayer."""

    def __init__(
        self,
        dim: int,
        heads: int,
        layout: WindowLayout,
        rng: np.random.Generator,
        ffn_ratio: int = 4,
        use_effn: bool = True,
    ):
        self.layout = layout
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, layout.window_size, rng)
        self.norm2 = LayerNorm(dim)
        if use_effn:
            self.effn = EFFN(dim, ffn_ratio, rng)
        else:
            self.mlp = FFN(dim, ffn_ratio, rng)

    @property
    def ffn(self) -> Module:
        return self.effn if hasattr(self, "effn") else self.mlp

    def attention_sublayer(self, x: Tensor) -> Tensor:
        lay = self.layout
        b, n, c = x.shape
        if n != lay.feature_h * lay.feature_w:
            raise ShapeError(f"{n} tokens do not match a {lay.feature_h}x{lay.feature_w} grid")
        y = self.norm1(x).reshape(b, lay.feature_h, lay.feature_w, c)
        y = pad_to_windows(y, lay)
        y = cyclic_shift(y, lay)
        windows = self.attn(window_partition(y, lay), lay.mask if lay.shift else None)
        y = window_reverse(windows, lay, crop=False)
        y = cyclic_shift(y, lay, inverse=True)
        if lay.pad_h or lay.pad_w:
            y = y[:, : lay.feature_h, : lay.feature_w, :]
        return y.reshape(b, n, c)

    def forward(self, x: Tensor) -> Tensor:
        x = self.attention_sublayer(x) + x
        hw = (self.layout.feature_h, self.layout.feature_w)
        return self.ffn(self.norm2(x), hw) + x


class MWABlockPair(Module):
    """Regular-window block followed by shifted-window block."""

    def __init__(
        self,
        dim: int,
        heads: int,
        resolution: tuple[int, int],
        window_size: int,
        rng: np.random.Generator,
        ffn_ratio: int = 4,
        use_effn: bool = True,
    ):
        h, w = resolution
        self.regular = MWABlock(
            dim, heads, WindowLayout.for_stage(h, w, window_size, False), rng, ffn_ratio, use_effn
        )
        self.shifted = MWABlock(
            dim, heads, WindowLayout.for_stage(h, w, window_size, True), rng, ffn_ratio, use_effn
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.shifted(self.regular(x))



def mwa_block_pair(x: Tensor, pair: MWABlockPair) -> Tensor:
    lay = pair.regular.layout
    if x.ndim != 3 or x.shape[1] != lay.feature_h * lay.feature_w:
        raise ShapeError(f"mwa_block_pair: tokens {x.shape} do not match a {lay.feature_h}x{lay.feature_w} map")
    return pair(x)
