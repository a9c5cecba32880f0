"""Hierarchical window-attention backbone (stages 1-3).

Feature maps travel channels-last, (B, H, W, C). Stage 1 embeds 4x4 image
patches; every stage then halves the resolution with a patch merge and runs
``depth`` blocks that alternate regular and cyclically shifted windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError
from .nn import INIT_STD, Attention, Conv2d, LayerNorm, Linear, Mlp, Module, Parameter
from .rng import Rng
from .tensor import Tensor, add, permute, reshape, roll

MASK_VALUE = -1e9


@dataclass(frozen=True)
class StageConfig:
    depth: int
    dim: int
    heads: int
    window: int
    shift: int

    def __post_init__(self):
        if self.depth < 2 or self.depth % 2:
            raise ConfigError(f"stage depth must be a positive even number, got {self.depth}")
        if self.dim % self.heads:
            raise ConfigError(f"stage dim {self.dim} not divisible by heads {self.heads}")
        if not 0 <= self.shift < self.window:
            raise ConfigError(f"shift {self.shift} must lie in [0, window={self.window})")


def fit_window(resolution: int, window: int, shift: int) -> tuple[int, int]:
    """Clamp the window to the feature map; a single window is never shifted."""
    if resolution <= window:
        return resolution, 0
    if resolution % window:
        raise ConfigError(f"feature size {resolution} is not divisible by window {window}")
    return window, shift


# ---------------------------------------------------------------------------
# functional pieces


def patch_embed(img: Tensor, weight: Tensor, bias: Tensor, patch: int = 4) -> Tensor:
    """Non-overlapping patch projection; (B, 3, H, W) -> (B, dim, H/p, W/p)."""
    h, w = img.shape[2:]
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {patch}")
    return F.conv2d(img, weight, bias, stride=patch, padding=0)


def merge_gather(x: Tensor) -> Tensor:
    """Concatenate each 2x2 neighbourhood: (B, H, W, C) -> (B, H/2, W/2, 4C).

    Channel blocks are ordered (top-left, bottom-left, top-right, bottom-right).
    """
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"patch merging needs even extents, got {h}x{w}")
    x = reshape(x, (b, h // 2, 2, w // 2, 2, c))  # (b, h2, dy, w2, dx, c)
    x = permute(x, (0, 1, 3, 4, 2, 5))  # (b, h2, w2, dx, dy, c)
    return reshape(x, (b, h // 2, w // 2, 4 * c))


def window_partition(x: Tensor, m: int) -> Tensor:
    """(B, H, W, C) -> (B * H/m * W/m, m*m, C), windows in row-major order."""
    b, h, w, c = x.shape
    if h % m or w % m:
        raise ConfigError(f"feature {h}x{w} is not divisible by window {m}")
    x = reshape(x, (b, h // m, m, w // m, m, c))
    x = permute(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b * (h // m) * (w // m), m * m, c))


def window_reverse(windows: Tensor, m: int, h: int, w: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // m) * (w // m))
    x = reshape(windows, (b, h // m, w // m, m, m, c))
    x = permute(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, h, w, c))


def relative_position_index(m: int) -> np.ndarray:
    """(m*m, m*m) lookup into a (2m-1)^2 bias table, keyed by (drow, dcol)."""
    rows, cols = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()])  # (2, m*m)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    return rel[0] * (2 * m - 1) + rel[1]


def shift_mask(h: int, w: int, m: int, s: int) -> np.ndarray:
    """Additive mask (nW, m*m, m*m) for attention inside cyclically shifted windows.

    Two positions may attend to each other only if they came from the same
    contiguous region before the shift.
    """
    n_win = (h // m) * (w // m)
    if s == 0:
        return np.zeros((n_win, m * m, m * m))
    labels = np.zeros((1, h, w, 1))
    cnt = 0
    for hs in (slice(0, -m), slice(-m, -s), slice(-s, None)):
        for ws in (slice(0, -m), slice(-m, -s), slice(-s, None)):
            labels[:, hs, ws, :] = cnt
            cnt += 1
    lw = window_partition(Tensor(labels, dtype=np.float64), m).data[..., 0]  # (nW, m*m)
    diff = lw[:, None, :] - lw[:, :, None]
    return np.where(diff != 0, MASK_VALUE, 0.0)


# ---------------------------------------------------------------------------
# modules


class PatchEmbed(Module):
    def __init__(self, dim: int, rng: Rng, patch: int = 4, in_ch: int = 3):
        self.proj = Conv2d(in_ch, dim, patch, rng.child("proj"), stride=patch)
        self.norm = LayerNorm(dim)
        self.patch = patch

    def forward(self, img: Tensor) -> Tensor:
        x = patch_embed(img, self.proj.weight, self.proj.bias, self.patch)
        return self.norm(permute(x, (0, 2, 3, 1)))


class PatchMerging(Module):
    """2x2 gather, layer norm over 4C, bias-free projection 4C -> 2C."""

    def __init__(self, dim: int, rng: Rng):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng.child("reduction"), bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.reduction(self.norm(merge_gather(x)))


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, window: int, rng: Rng, qkv_bias: bool = True):
        self.attn = Attention(dim, heads, rng.child("attn"), qkv_bias)
        self.rel_bias = Parameter(rng.child("rel_bias").trunc_normal(((2 * window - 1) ** 2, heads), INIT_STD))
        self.rel_index = relative_position_index(window)
        self.window = window
        self.heads = heads

    def bias(self) -> Tensor:
        n = self.window * self.window
        table = F.take_rows(self.rel_bias, self.rel_index.reshape(-1))
        return permute(reshape(table, (n, n, self.heads)), (2, 0, 1))

    def forward(self, windows: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Window MSA on (nW*B, m*m, C) with relative position bias (+mask)."""
        groups = 1 if mask is None else mask.shape[0]
        return self.attn(windows, self.bias(), mask, groups)


class SwinBlock(Module):
    def __init__(self, dim: int, heads: int, window: int, shift: int, resolution: int, rng: Rng,
                 mlp_ratio: int = 4, qkv_bias: bool = True):
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rng.child("attn"), qkv_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, rng.child("mlp"))
        self.window = window
        self.shift = shift
        self.resolution = resolution
        self.mask = shift_mask(resolution, resolution, window, shift) if shift else None

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        m, s = self.window, self.shift
        y = self.norm1(x)
        if s:
            y = roll(y, (-s, -s), (1, 2))
        y, _ = self.attn(window_partition(y, m), self.mask)
        y = window_reverse(y, m, h, w)
        if s:
            y = roll(y, (s, s), (1, 2))
        x = add(x, y)
        return add(x, self.mlp(self.norm2(x)))


class SwinStage(Module):
    """Optional patch embedding, patch merge, then alternating W-MSA / SW-MSA blocks."""

    def __init__(self, dim_in: int, cfg: StageConfig, resolution_in: int, rng: Rng, *, embed_patch: int = 0,
                 mlp_ratio: int = 4, qkv_bias: bool = True):
        if cfg.dim != 2 * dim_in:
            raise ConfigError(f"patch merging doubles channels: {dim_in} -> {2 * dim_in}, config says {cfg.dim}")
        res_in = resolution_in
        self.embed = None
        if embed_patch:
            self.embed = PatchEmbed(dim_in, rng.child("embed"), embed_patch)
            res_in //= embed_patch
        if res_in % 2:
            raise ConfigError(f"patch merging needs an even feature size, got {res_in}")
        self.merge = PatchMerging(dim_in, rng.child("merge"))
        self.resolution = res_in // 2
        window, shift = fit_window(self.resolution, cfg.window, cfg.shift)
        self.blocks = [
            SwinBlock(cfg.dim, cfg.heads, window, shift if i % 2 else 0, self.resolution,
                      rng.child("blocks", i), mlp_ratio, qkv_bias)
            for i in range(cfg.depth)
        ]

    def forward(self, x: Tensor) -> Tensor:
        if self.embed is not None:
            x = self.embed(x)
        x = self.merge(x)
        return run_blocks(self.blocks, x)


def run_blocks(blocks, x: Tensor) -> Tensor:
    """The shape-preserving part of a stage."""
    for blk in blocks:
        x = blk(x)
    return x
