"""End-to-end SparseSwin: stages 1-3, SparTa, layer norm, linear head.

Also holds the cost accounting (exact parameter counts, analytic
multiply-accumulate counts) and the stage freezing used for fine-tuning.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import LayerNorm, Linear, Module
from .rng import Rng
from .sparta import SparTa, SparTaConfig, SparTaState
from .swin import StageConfig, SwinStage, fit_window
from .tensor import Tensor, mean, permute

PUBLISHED_TOTAL_PARAMS = 17_580_000  # "17.58 M", 100-class model
STAGE_NAMES = ("stage1", "stage2", "stage3", "sparta")
GROUPS = STAGE_NAMES + ("norm", "head")


@dataclass(frozen=True)
class SparseSwinConfig:
    input_size: int = 224
    patch: int = 4
    embed_dim: int = 96
    depths: tuple = (2, 2, 6)
    heads: tuple = (6, 12, 24)
    window: int = 7
    shift: int = 3
    mlp_ratio: int = 4
    qkv_bias: bool = True
    num_classes: int = 100
    sparta: SparTaConfig = field(default_factory=SparTaConfig)
    head_pool: str = "mean_token"

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "heads", tuple(self.heads))
        if isinstance(self.sparta, dict):
            object.__setattr__(self, "sparta", SparTaConfig(**self.sparta))
        if len(self.depths) != 3 or len(self.heads) != 3:
            raise ConfigError("depths and heads need one entry per backbone stage (3)")
        if self.input_size % (self.patch * 8):
            raise ConfigError(f"input_size {self.input_size} must be divisible by {self.patch * 8}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.head_pool != "mean_token":
            raise ConfigError(f"unsupported head_pool {self.head_pool!r}")
        self.stage_configs()  # validates depth/heads/shift

    @property
    def reduction(self) -> int:
        return self.patch * 8

    @property
    def dims(self) -> tuple:
        """Channels after the patch embedding and after each of the three stages."""
        return tuple(self.embed_dim * 2**i for i in range(4))

    def stage_configs(self) -> list[StageConfig]:
        return [
            StageConfig(self.depths[i], self.dims[i + 1], self.heads[i], self.window, self.shift)
            for i in range(3)
        ]

    def resolutions(self, input_size: int | None = None) -> tuple:
        s = self.input_size if input_size is None else input_size
        return tuple(s // (self.patch * 2**i) for i in range(4))

    @property
    def sparta_in_features(self) -> int:
        return (self.input_size // self.reduction) ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["heads"] = list(self.heads)
        return d


def tiny_config(**overrides) -> SparseSwinConfig:
    """Desk-scale layout: 64px input, channels 8/16/32/64, 2x2 windows."""
    base = dict(
        input_size=64, embed_dim=8, depths=(2, 2, 2), heads=(2, 4, 8), window=2, shift=1,
        num_classes=4, sparta=SparTaConfig(t=4, e=16, heads=4, loops=2),
    )
    base.update(overrides)
    return SparseSwinConfig(**base)


class SparseSwin(Module):
    def __init__(self, cfg: SparseSwinConfig, rng: Rng):
        self.cfg = cfg
        stages = cfg.stage_configs()
        dims = cfg.dims
        res = cfg.input_size
        self.stage1 = SwinStage(dims[0], stages[0], res, rng.child("stage1"), embed_patch=cfg.patch,
                                mlp_ratio=cfg.mlp_ratio, qkv_bias=cfg.qkv_bias)
        self.stage2 = SwinStage(dims[1], stages[1], self.stage1.resolution, rng.child("stage2"),
                                mlp_ratio=cfg.mlp_ratio, qkv_bias=cfg.qkv_bias)
        self.stage3 = SwinStage(dims[2], stages[2], self.stage2.resolution, rng.child("stage3"),
                                mlp_ratio=cfg.mlp_ratio, qkv_bias=cfg.qkv_bias)
        self.sparta = SparTa(dims[3], cfg.sparta_in_features, cfg.sparta, rng.child("sparta"))
        self.norm = LayerNorm(cfg.sparta.e)
        self.head = Linear(cfg.sparta.e, cfg.num_classes, rng.child("head"))

    def backbone(self, images: Tensor) -> Tensor:
        """Stages 1-3; returns the stage-3 map as (B, C, h, w)."""
        s = self.cfg.input_size
        if images.ndim != 4 or images.shape[1:] != (3, s, s):
            raise ShapeError(f"expected images of shape (B, 3, {s}, {s}), got {images.shape}")
        x = self.stage3(self.stage2(self.stage1(images)))
        return permute(x, (0, 3, 1, 2))

    def forward_with_state(self, images: Tensor) -> tuple[Tensor, SparTaState]:
        state = self.sparta(self.backbone(images))
        pooled = mean(self.norm(state.tokens), axis=1)
        return self.head(pooled), state

    def forward(self, images: Tensor) -> Tensor:
        return self.forward_with_state(images)[0]


def build(cfg: SparseSwinConfig, rng: Rng | int = 0) -> SparseSwin:
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    return SparseSwin(cfg, rng)


# ---------------------------------------------------------------------------
# parameter accounting


@dataclass
class ParamReport:
    params: dict
    subtotals: dict
    total: int

    def to_json_dict(self) -> dict:
        flat = {f"param/{k}": v for k, v in self.params.items()}
        flat.update({f"subtotal/{k}": v for k, v in self.subtotals.items()})
        flat["total"] = self.total
        flat["reference/published_total"] = PUBLISHED_TOTAL_PARAMS
        flat["reference/difference"] = self.total - PUBLISHED_TOTAL_PARAMS
        return dict(sorted(flat.items()))

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1)

    def summary(self) -> str:
        lines = [f"{g:<10} {n:>14,}" for g, n in self.subtotals.items()]
        lines.append(f"{'total':<10} {self.total:>14,}")
        diff = self.total - PUBLISHED_TOTAL_PARAMS
        lines.append(
            f"reference  {PUBLISHED_TOTAL_PARAMS:>14,}  (published 17.58 M; difference {diff:+,} = "
            f"{self.total / PUBLISHED_TOTAL_PARAMS:.3f}x)"
        )
        lines.append("counts include layer-norm gains/biases and relative-position bias tables")
        return "\n".join(lines)


def count_params(model: SparseSwin) -> ParamReport:
    params = {name: int(p.size) for name, p in model.named_parameters()}
    subtotals = {g: 0 for g in GROUPS}
    for name, n in params.items():
        subtotals[name.split(".", 1)[0]] += n
    return ParamReport(params, subtotals, sum(subtotals.values()))


# ---------------------------------------------------------------------------
# multiply-accumulate accounting


@dataclass
class FlopReport:
    backbone: int
    sparta_converter: int
    sparta_msa: int
    sparta_mlp: int
    head: int
    input_size: int = 0

    @property
    def total(self) -> int:
        return self.backbone + self.sparta_converter + self.sparta_msa + self.sparta_mlp + self.head

    def to_json_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("backbone", "sparta_converter", "sparta_msa", "sparta_mlp", "head")}
        d["total"] = self.total
        d["input_size"] = self.input_size
        return dict(sorted(d.items()))

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1)


def msa_macs(tokens: int, dim: int) -> int:
    """QKV + output projections (4 N C^2) plus QK^T and AV (2 N^2 C) for one sequence."""
    return 4 * tokens * dim * dim + 2 * tokens * tokens * dim


def mlp_macs(tokens: int, dim: int, ratio: int) -> int:
    return 2 * tokens * dim * (ratio * dim)


def count_flops(cfg: SparseSwinConfig | SparseSwin, input_size: int | None = None) -> FlopReport:
    """Multiply-accumulates of one forward pass for a single image.

    Norms, softmax, GELU, bias adds and pooling are not counted. The
    converter's linear map is sized for the given input, i.e. as if the model
    were reconfigured for it.
    """
    if isinstance(cfg, SparseSwin):
        cfg = cfg.cfg
    s = cfg.input_size if input_size is None else input_size
    if s % cfg.reduction:
        raise ConfigError(f"input size {s} must be divisible by {cfg.reduction}")
    dims = cfg.dims
    res = cfg.resolutions(s)
    p = cfg.patch

    backbone = res[0] ** 2 * dims[0] * 3 * p * p
    for i, st in enumerate(cfg.stage_configs()):
        r, c_prev, c = res[i + 1], dims[i], st.dim
        backbone += r * r * (4 * c_prev) * (2 * c_prev)
        m, _ = fit_window(r, st.window, st.shift)
        n_win = (r // m) ** 2
        per_block = n_win * msa_macs(m * m, c) + mlp_macs(r * r, c, cfg.mlp_ratio)
        backbone += st.depth * per_block

    sp = cfg.sparta
    hw = res[3] ** 2
    converter = hw * sp.e * dims[3] * sp.conv_kernel**2 + sp.e * hw * sp.t
    return FlopReport(
        backbone=backbone,
        sparta_converter=converter,
        sparta_msa=sp.loops * msa_macs(sp.t, sp.e),
        sparta_mlp=sp.loops * mlp_macs(sp.t, sp.e, sp.mlp_ratio),
        head=sp.e * cfg.num_classes,
        input_size=s,
    )


# ---------------------------------------------------------------------------
# freezing


def _stage_name(s) -> str:
    if isinstance(s, (int, np.integer)) and 1 <= s <= 4:
        return STAGE_NAMES[s - 1]
    if isinstance(s, str):
        if s.isdigit():
            return _stage_name(int(s))
        if s in GROUPS:
            return s
    raise ConfigError(f"unknown stage {s!r}; expected 1-4 or one of {', '.join(GROUPS)}")


def freeze(model: Module, stages) -> dict:
    """Mark parameters under ``stages`` non-trainable, all others trainable.

    Returns the freeze mask: parameter name -> trainable flag.
    """
    frozen = {_stage_name(s) for s in stages}
    mask = {}
    for name, p in model.named_parameters():
        trainable = name.split(".", 1)[0] not in frozen
        p.requires_grad = trainable
        if not trainable:
            p.grad = None
        mask[name] = trainable
    return mask


# ---------------------------------------------------------------------------
# shape description


def describe(cfg: SparseSwinConfig, input_size: int | None = None) -> dict:
    """Per-stage output shapes for ``input_size`` (default: the configured size)."""
    s = cfg.input_size if input_size is None else input_size
    if s % cfg.reduction:
        raise ConfigError(f"input size {s} must be divisible by {cfg.reduction}")
    res = cfg.resolutions(s)
    dims = cfg.dims
    for i, st in enumerate(cfg.stage_configs()):
        fit_window(res[i + 1], st.window, st.shift)
    positions = res[3] ** 2
    if positions != cfg.sparta_in_features:
        raise ConfigError(
            f"SparTa linear in-features: input {s} yields {res[3]}x{res[3]} = {positions} positions "
            f"but the model is configured for {cfg.sparta_in_features} (input_size {cfg.input_size}); "
            "set model.input_size to reconfigure"
        )
    chain = [
        ("input", [3, s, s]),
        ("patch_embed", [res[0], res[0], dims[0]]),
        ("stage1", [res[1], res[1], dims[1]]),
        ("stage2", [res[2], res[2], dims[2]]),
        ("stage3", [res[3], res[3], dims[3]]),
        ("sparta", [cfg.sparta.t, cfg.sparta.e]),
        ("head", [cfg.num_classes]),
    ]
    return {"input_size": s, "sparta_in_features": positions, "chain": chain}


def format_chain(desc: dict) -> str:
    parts = [f"{desc['input_size']}²"]
    for name, shape in desc["chain"][1:5]:
        parts.append(f"{shape[0]}²×{shape[2]}")
    t, e = desc["chain"][5][1]
    parts.append(f"({t}, {e})")
    return " → ".join(parts)


def with_input_size(cfg: SparseSwinConfig, input_size: int) -> SparseSwinConfig:
    return replace(cfg, input_size=input_size)
