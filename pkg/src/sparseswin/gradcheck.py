"""Central finite differences and the float64 gradient-check suites.

Each check builds a small random problem, projects its output onto a fixed
random direction to get a scalar loss, and compares reverse-mode gradients
of every input/parameter against central differences. Error is measured as
``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` per tensor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .nn import Linear, TransformerBlock, iter_modules
from .regularizers import RegConfig, penalty
from .rng import Rng
from .sparta import SparTa, SparTaConfig, SparseTokenConverter
from .swin import PatchMerging, StageConfig, SwinBlock, SwinStage, WindowAttention, shift_mask, window_partition
from .tensor import Tensor, absolute, add, concat, matmul, mul, permute, reshape, roll, square, tsum

DEFAULT_H = 1e-5
TOLERANCE = 1e-4
MAX_COORDS = 48  # finite-difference coordinates sampled per tensor


def finite_diff_grad(f: Callable[[], float], x: Tensor, h: float = DEFAULT_H,
                     indices: np.ndarray | None = None) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``, perturbing ``x.data`` in place.

    ``f`` takes no arguments and reads ``x`` by closure. With ``indices``
    (flat positions) only those entries are filled; the rest stay zero.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


@dataclass
class CheckResult:
    name: str
    group: str
    worst: float
    worst_tensor: str
    worst_index: tuple
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], rng: Rng,
                    h: float = DEFAULT_H, max_coords: int | None = MAX_COORDS,
                    perturb: float = 0.0) -> tuple[float, str, tuple]:
    """Compare backward() with finite differences for every tensor in ``tensors``.

    Returns (worst relative error, tensor name, index of the worst entry).
    """
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    worst = (0.0, "", ())
    for name, t in tensors.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        if perturb:
            analytic = analytic + perturb * max(np.abs(analytic).max(), 1.0)
        if max_coords is not None and t.size > max_coords:
            pick = np.sort(rng.child(name).permutation(t.size)[:max_coords])
        else:
            pick = np.arange(t.size)
        numeric = finite_diff_grad(lambda: loss_fn().item(), t, h, pick)
        a = analytic.reshape(-1)[pick]
        n = numeric.reshape(-1)[pick]
        err = rel_err(a, n)
        if err >= worst[0]:
            at = int(pick[np.argmax(np.abs(a - n))]) if a.size else 0
            worst = (err, name, np.unravel_index(at, t.shape))
    return worst


def _project(out: Tensor, rng: Rng) -> Tensor:
    """Scalar loss sum(out * r) for a fixed random direction r."""
    r = Tensor(rng.child("direction").normal(out.shape))
    return tsum(mul(out, r))


def _leaf(rng: Rng, shape, name: str, scale: float = 1.0) -> Tensor:
    return Tensor(rng.child(name).normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _params64(module) -> dict[str, Tensor]:
    module.astype(np.float64)
    for m in iter_modules(module):
        # zero-initialized biases would make bias-gradients trivially exact; randomize them
        for attr in ("bias",):
            b = getattr(m, attr, None)
            if isinstance(b, Tensor) and b.requires_grad and not b.data.any():
                b.data = np.linspace(-0.1, 0.1, b.size).reshape(b.shape)
    return dict(module.named_parameters())


def _scale_weights(module, rng: Rng, std: float = 0.3) -> None:
    """Replace the tiny 0.02-std init so gradients have a useful dynamic range."""
    for name, p in module.named_parameters():
        if name.endswith("gain"):
            p.data = 1.0 + 0.1 * rng.child(name).normal(p.shape)
        elif not name.endswith("bias"):
            p.data = rng.child(name).normal(p.shape, std)


# ---------------------------------------------------------------------------
# problems: each takes (rng, variant) and returns (loss_fn, tensors)


def _matmul(rng, v):
    shapes = [((3, 4), (4, 5)), ((2, 3, 4), (2, 4, 2)), ((2, 2, 3, 5), (5, 3))]
    sa, sb = shapes[v % 3]
    a, b = _leaf(rng, sa, "a"), _leaf(rng, sb, "b")
    return (lambda: _project(matmul(a, b), rng)), {"a": a, "b": b}


def _conv2d(rng, v):
    cases = [((2, 3, 5, 5), 4, 3, 1, 1), ((1, 2, 6, 6), 3, 2, 2, 0), ((1, 3, 8, 8), 4, 4, 4, 0)]
    xs, co, k, s, p = cases[v % 3]
    x = _leaf(rng, xs, "x")
    w = _leaf(rng, (co, xs[1], k, k), "w", 0.5)
    b = _leaf(rng, (co,), "b")
    return (lambda: _project(F.conv2d(x, w, b, s, p), rng)), {"x": x, "w": w, "b": b}


def _layer_norm(rng, v):
    shape = [(3, 5), (2, 4, 6), (7, 3)][v % 3]
    x = _leaf(rng, shape, "x")
    g = _leaf(rng, shape[-1:], "g")
    b = _leaf(rng, shape[-1:], "b")
    return (lambda: _project(F.layer_norm(x, g, b), rng)), {"x": x, "gain": g, "bias": b}


def _softmax(rng, v):
    shape, axis = [((4, 5), -1), ((2, 3, 4), 1), ((3, 6), 0)][v % 3]
    x = _leaf(rng, shape, "x", 2.0)
    return (lambda: _project(F.softmax(x, axis), rng)), {"x": x}


def _gelu(rng, v):
    shape = [(4,), (3, 5), (2, 3, 4)][v % 3]
    x = _leaf(rng, shape, "x", 2.0)
    return (lambda: _project(F.gelu(x), rng)), {"x": x}


def _cross_entropy(rng, v):
    n, k = [(4, 3), (6, 5), (2, 10)][v % 3]
    x = _leaf(rng, (n, k), "x", 2.0)
    labels = rng.child("labels").integers(0, k, n)
    return (lambda: F.cross_entropy(x, labels)), {"logits": x}


def _elementwise(rng, v):
    shape = [(3, 4), (2, 3, 4), (5, 2)][v % 3]
    a = _leaf(rng, shape, "a")
    b = _leaf(rng, shape[-1:], "b")
    c = Tensor(np.abs(rng.child("c").normal(shape)) + 0.5, requires_grad=True, dtype=np.float64)

    def loss():
        y = add(mul(a, b), square(a))
        y = add(y, absolute(c))
        y = roll(y, 1, 0)
        y = permute(reshape(y, (-1, shape[-1])), (1, 0))
        y = concat([y[:, :1], y], axis=1)
        return _project(y, rng)

    return loss, {"a": a, "b": b, "c": c}


def _take_rows(rng, v):
    rows, cols = [(5, 3), (9, 2), (4, 4)][v % 3]
    table = _leaf(rng, (rows, cols), "table")
    index = rng.child("index").integers(0, rows, (rows, rows))
    return (lambda: _project(F.take_rows(table, index), rng)), {"table": table}


def _composite(rng, v):
    """conv2d -> layer_norm -> matmul, one scalar loss."""
    c = [2, 3, 4][v % 3]
    x = _leaf(rng, (2, c, 4, 4), "x")
    w = _leaf(rng, (4, c, 3, 3), "w", 0.5)
    b = _leaf(rng, (4,), "b")
    g = _leaf(rng, (4,), "g")
    beta = _leaf(rng, (4,), "beta")
    m = _leaf(rng, (4, 3), "m")

    def loss():
        y = F.conv2d(x, w, b, 1, 1)
        y = permute(y, (0, 2, 3, 1))
        y = F.layer_norm(y, g, beta)
        return _project(matmul(y, m), rng)

    return loss, {"x": x, "w": w, "b": b, "gain": g, "beta": beta, "m": m}


def _patch_merging(rng, v):
    c = [2, 3, 4][v % 3]
    mod = PatchMerging(c, rng.child("mod"))
    _scale_weights(mod, rng)
    params = _params64(mod)
    x = _leaf(rng, (2, 4, 4, c), "x")
    return (lambda: _project(mod(x), rng)), {"x": x, **params}


def _window_msa(rng, v):
    h, m, s, heads = [(4, 2, 1, 2), (6, 3, 1, 1), (4, 2, 1, 4)][v % 3]
    dim = 4
    mod = WindowAttention(dim, heads, m, rng.child("mod"))
    _scale_weights(mod, rng)
    params = _params64(mod)
    mask = shift_mask(h, h, m, s)
    x = _leaf(rng, (1, h, h, dim), "x")

    def loss():
        out, _ = mod(window_partition(x, m), mask)
        return _project(out, rng)

    return loss, {"x": x, **params}


def _swin_block(rng, v):
    res, m, s = [(4, 2, 1), (6, 3, 1), (4, 4, 0)][v % 3]
    mod = SwinBlock(4, 2, m, s, res, rng.child("mod"), mlp_ratio=2)
    _scale_weights(mod, rng)
    params = _params64(mod)
    x = _leaf(rng, (1, res, res, 4), "x")
    return (lambda: _project(mod(x), rng)), {"x": x, **params}


def _swin_stage(rng, v):
    res = [8, 4, 8][v % 3]
    mod = SwinStage(2, StageConfig(2, 4, 2, 2, 1), res, rng.child("mod"), mlp_ratio=2)
    _scale_weights(mod, rng)
    params = _params64(mod)
    x = _leaf(rng, (1, res, res, 2), "x")
    return (lambda: _project(mod(x), rng)), {"x": x, **params}


TINY_SPARTA = SparTaConfig(t=4, e=8, heads=2, loops=2)


def _converter(rng, v):
    c, hw = [(3, 2), (2, 3), (4, 1)][v % 3]
    mod = SparseTokenConverter(c, hw * hw, TINY_SPARTA, rng.child("mod"))
    _scale_weights(mod, rng)
    params = _params64(mod)
    x = _leaf(rng, (2, c, hw, hw), "x")
    return (lambda: _project(mod(x), rng)), {"x": x, **params}


def _transformer_block(rng, v):
    t, e, heads = [(4, 8, 2), (3, 4, 1), (5, 8, 4)][v % 3]
    mod = TransformerBlock(e, heads, rng.child("mod"))
    _scale_weights(mod, rng)
    params = _params64(mod)
    x = _leaf(rng, (2, t, e), "x")
    return (lambda: _project(mod(x)[0], rng)), {"x": x, **params}


def _sparta(rng, v):
    c, hw = [(4, 2), (3, 3), (2, 1)][v % 3]
    mod = SparTa(c, hw * hw, TINY_SPARTA, rng.child("mod"))
    _scale_weights(mod, rng)
    params = _params64(mod)
    x = _leaf(rng, (2, c, hw, hw), "x")
    return (lambda: _project(mod(x).tokens, rng)), {"x": x, **params}


def _attention_penalty(rng, v):
    kind = ["l1", "l2", "l2"][v % 3]
    mod = SparTa(3, 4, TINY_SPARTA, rng.child("mod"))
    _scale_weights(mod, rng)
    params = _params64(mod)
    x = _leaf(rng, (2, 3, 2, 2), "x")
    cfg = RegConfig(kind, 0.5)

    def loss():
        state = mod(x)
        return add(_project(state.tokens, rng), penalty(state.attn, cfg))

    return loss, {"x": x, **params}


def _penalty_direct(rng, v):
    kind = ["l1", "l2", "l1"][v % 3]
    attn = [Tensor(np.abs(rng.child("a", i).normal((2, 2, 3, 3))) + 0.05, requires_grad=True, dtype=np.float64)
            for i in range(2)]
    cfg = RegConfig(kind, 0.1)
    return (lambda: penalty(attn, cfg)), {f"attn{i}": a for i, a in enumerate(attn)}


SUITES: dict[str, list[tuple[str, Callable]]] = {
    "tensor": [
        ("matmul", _matmul),
        ("conv2d", _conv2d),
        ("layer_norm", _layer_norm),
        ("softmax", _softmax),
        ("gelu", _gelu),
        ("cross_entropy", _cross_entropy),
        ("elementwise", _elementwise),
        ("take_rows", _take_rows),
        ("conv2d>layer_norm>matmul", _composite),
    ],
    "backbone": [
        ("patch_merging", _patch_merging),
        ("window_msa", _window_msa),
        ("swin_block", _swin_block),
        ("swin_stage", _swin_stage),
    ],
    "sparta": [
        ("sparse_token_converter", _converter),
        ("regular_transformer_block", _transformer_block),
        ("sparta_forward", _sparta),
        ("attention_penalty", _penalty_direct),
        ("sparta+penalty", _attention_penalty),
    ],
}


def run_suite(groups=("tensor", "backbone", "sparta"), seeds: int = 10, fault: str | None = None,
              h: float = DEFAULT_H, max_coords: int | None = MAX_COORDS) -> list[CheckResult]:
    """Run every check in ``groups`` over ``seeds`` seeds.

    ``fault`` names a check whose analytic gradient gets deliberately
    perturbed (verifies that the harness can fail).
    """
    results = []
    for group in groups:
        if group not in SUITES:
            raise KeyError(f"unknown gradcheck group {group!r}; choose from {sorted(SUITES)}")
        for name, problem in SUITES[group]:
            t0 = time.perf_counter()
            worst = (0.0, "", ())
            for seed in range(seeds):
                rng = Rng(seed, ("gradcheck", name))
                loss_fn, tensors = problem(rng, seed)
                res = check_gradients(loss_fn, tensors, rng, h, max_coords,
                                      perturb=1e-2 if fault == name else 0.0)
                if res[0] >= worst[0]:
                    worst = res
            results.append(CheckResult(name, group, worst[0], worst[1], tuple(int(i) for i in worst[2]),
                                       seeds, time.perf_counter() - t0))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'group':<9} {'check':<28} {'worst rel-err':>13}  status  where"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        where = "" if r.passed else f"{r.worst_tensor}{list(r.worst_index)}"
        lines.append(f"{r.group:<9} {r.name:<28} {r.worst:>13.3e}  {status:<6}  {where}")
    return "\n".join(lines)
