"""Parameter containers and the layers shared by the backbone and SparTa."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor, add, matmul, mul, permute, reshape

INIT_STD = 0.02


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Walks attributes in definition order to name parameters by dot path."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                seen: set[int] = set()
                for i, sub in enumerate(val):
                    if id(sub) in seen:  # shared weights appear once
                        continue
                    seen.add(id(sub))
                    yield from sub.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def param_dict(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.param_dict()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for n, p in params.items():
            if state[n].shape != p.shape:
                raise ShapeError(f"{n}: stored shape {state[n].shape} != {p.shape}")
        for n, p in params.items():
            p.data = np.array(state[n], dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, dtype=np.float32):
        self.weight = Parameter(rng.trunc_normal((d_in, d_out), INIT_STD, dtype=dtype))
        if bias:
            self.bias = Parameter(np.zeros(d_out, dtype=dtype))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = F.LN_EPS):
        self.gain = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: Rng, stride: int = 1, padding: int = 0,
                 dtype=np.float32):
        self.weight = Parameter(rng.trunc_normal((c_out, c_in, kernel, kernel), INIT_STD, dtype=dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Mlp(Module):
    def __init__(self, dim: int, ratio: int, rng: Rng, dtype=np.float32):
        self.fc1 = Linear(dim, dim * ratio, rng.child("fc1"), dtype=dtype)
        self.fc2 = Linear(dim * ratio, dim, rng.child("fc2"), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def multi_head_attention(x: Tensor, qkv: Linear, proj: Linear, heads: int,
                         bias: Tensor | None = None, mask: np.ndarray | None = None,
                         groups: int = 1) -> tuple[Tensor, Tensor]:
    """Scaled dot-product self-attention over the middle axis of ``x`` (B, N, C).

    ``bias`` (heads, N, N) is added to the logits of every sequence. ``mask``
    has shape (groups, N, N) and is added to sequence ``i`` with index
    ``i % groups``; it is how shifted windows block cross-region attention.
    Returns the projected output and the post-softmax weights (B, heads, N, N).
    """
    b, n, c = x.shape
    if c % heads:
        raise ShapeError(f"attention: channels {c} not divisible by heads {heads}")
    hd = c // heads
    q_k_v = permute(reshape(qkv(x), (b, n, 3, heads, hd)), (2, 0, 3, 1, 4))
    q = mul(q_k_v[0], hd ** -0.5)
    k, v = q_k_v[1], q_k_v[2]
    logits = matmul(q, permute(k, (0, 1, 3, 2)))
    if bias is not None:
        logits = add(logits, bias)
    if mask is not None:
        logits = reshape(logits, (b // groups, groups, heads, n, n))
        logits = add(logits, Tensor(mask[:, None].astype(logits.dtype)))
        logits = reshape(logits, (b, heads, n, n))
    attn = F.softmax(logits, axis=-1)
    out = permute(matmul(attn, v), (0, 2, 1, 3))
    return proj(reshape(out, (b, n, c))), attn


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: Rng, qkv_bias: bool = True, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.qkv = Linear(dim, 3 * dim, rng.child("qkv"), bias=qkv_bias, dtype=dtype)
        self.proj = Linear(dim, dim, rng.child("proj"), dtype=dtype)
        self.heads = heads

    def forward(self, x: Tensor, bias=None, mask=None, groups: int = 1):
        return multi_head_attention(x, self.qkv, self.proj, self.heads, bias, mask, groups)


class TransformerBlock(Module):
    """Pre-norm block: ``z' = MSA(LN(z)) + z``; ``out = MLP(LN(z')) + z'``."""

    def __init__(self, dim: int, heads: int, rng: Rng, mlp_ratio: int = 4, qkv_bias: bool = True,
                 dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng.child("attn"), qkv_bias, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(dim, mlp_ratio, rng.child("mlp"), dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h, attn = self.attn(self.norm1(x))
        x = add(x, h)
        x = add(x, self.mlp(self.norm2(x)))
        return x, attn


def iter_modules(module: Module) -> Iterator[Module]:
    yield module
    for val in vars(module).values():
        if isinstance(val, Module):
            yield from iter_modules(val)
        elif isinstance(val, (list, tuple)):
            for sub in val:
                if isinstance(sub, Module):
                    yield from iter_modules(sub)


def zero_projections(module: Module) -> None:
    """Zero every Linear weight and bias under ``module``."""
    for m in iter_modules(module):
        if isinstance(m, Linear):
            m.weight.data[...] = 0
            if m.bias is not None:
                m.bias.data[...] = 0
