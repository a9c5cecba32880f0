"""L1 / L2 penalties on the post-softmax SparTa attention weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, absolute, add, mul, square, tsum

KINDS = ("none", "l1", "l2")


@dataclass(frozen=True)
class RegConfig:
    kind: str = "none"
    lam: float = field(default=0.0, metadata={"key": "lambda"})
    reduction: str = "sum"

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigError(f"reg.kind must be one of {KINDS}, got {self.kind!r}")
        if self.lam < 0:
            raise ConfigError(f"reg.lambda must be non-negative, got {self.lam}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reg.reduction must be 'sum' or 'mean', got {self.reduction!r}")

    @property
    def active(self) -> bool:
        return self.kind != "none"


def penalty(attn: Sequence[Tensor], cfg: RegConfig) -> Tensor:
    """``lam * sum|a|`` (l1) or ``lam * sum a^2`` (l2) over every captured loop.

    Kind ``none`` yields a constant zero that carries no gradient.
    """
    if not cfg.active or not attn:
        dtype = attn[0].dtype if attn else np.float32
        return Tensor(np.zeros((), dtype=dtype))
    elem = absolute if cfg.kind == "l1" else square
    total = None
    count = 0
    for a in attn:
        term = tsum(elem(a))
        total = term if total is None else add(total, term)
        count += a.size
    scale = cfg.lam / count if cfg.reduction == "mean" else cfg.lam
    return mul(total, scale)
