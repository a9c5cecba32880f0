"""Stage 4: sparse token converter followed by looped transformer blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .nn import Conv2d, Linear, Module, TransformerBlock
from .rng import Rng
from .tensor import Tensor, permute, reshape


@dataclass(frozen=True)
class SparTaConfig:
    t: int = 49
    e: int = 512
    heads: int = 16
    mlp_ratio: int = 4
    loops: int = 2
    qkv_bias: bool = True
    conv_kernel: int = 3
    conv_stride: int = 1
    share_weights: bool = False

    def __post_init__(self):
        if self.t < 1 or self.e < 1 or self.loops < 1:
            raise ConfigError(f"t, e and loops must be >= 1 (got t={self.t}, e={self.e}, loops={self.loops})")
        if self.e % self.heads:
            raise ConfigError(f"embedding {self.e} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"converter kernel must be odd to preserve the spatial size, got {self.conv_kernel}")
        if self.conv_stride != 1:
            raise ConfigError("converter stride must be 1 so the spatial map keeps h*w positions")


@dataclass
class SparTaState:
    tokens: Tensor
    attn: list[Tensor] = field(default_factory=list)


class SparseTokenConverter(Module):
    """Conv C -> e (spatial size kept), then a shared linear map h*w -> t over positions."""

    def __init__(self, c_in: int, in_features: int, cfg: SparTaConfig, rng: Rng):
        k = cfg.conv_kernel
        self.conv = Conv2d(c_in, cfg.e, k, rng.child("conv"), stride=cfg.conv_stride, padding=k // 2)
        self.tokens = Linear(in_features, cfg.t, rng.child("tokens"))
        self.in_features = in_features

    def forward(self, x: Tensor) -> Tensor:
        b, _, h, w = x.shape
        if h * w != self.in_features:
            raise ConfigError(
                f"sparse token converter: feature map {h}x{w} gives {h * w} positions, "
                f"linear map expects {self.in_features}"
            )
        y = self.conv(x)  # (B, e, h, w)
        y = reshape(y, (b, y.shape[1], h * w))
        y = self.tokens(y)  # (B, e, t)
        return permute(y, (0, 2, 1))


class SparTa(Module):
    def __init__(self, c_in: int, in_features: int, cfg: SparTaConfig, rng: Rng):
        self.cfg = cfg
        self.converter = SparseTokenConverter(c_in, in_features, cfg, rng.child("converter"))
        n_blocks = 1 if cfg.share_weights else cfg.loops
        blocks = [
            TransformerBlock(cfg.e, cfg.heads, rng.child("blocks", i), cfg.mlp_ratio, cfg.qkv_bias)
            for i in range(n_blocks)
        ]
        self.blocks = blocks if not cfg.share_weights else blocks * cfg.loops

    def forward(self, x: Tensor) -> SparTaState:
        """(B, C, h, w) feature map -> latent tokens (B, t, e) plus per-loop attention."""
        z = self.converter(x)
        attn = []
        for blk in self.blocks:
            z, a = blk(z)
            attn.append(a)
        return SparTaState(z, attn)
