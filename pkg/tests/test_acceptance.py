"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` or directly as a script.
Each test records its line in ``conftest.ACCEPTANCE_LINES`` so the summary
at the end of the pytest run lists every criterion together.
"""

import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import param_oracle
from conftest import ACCEPTANCE_LINES, randn
from sparseswin import Tensor, build, cli, count_flops, count_params, tiny_config
from sparseswin.config import load_datasets, load_run_config, parse_run_config
from sparseswin.data import read_cifar, synthetic_dataset, write_cifar
from sparseswin.gradcheck import TOLERANCE, run_suite
from sparseswin.model import PUBLISHED_TOTAL_PARAMS, SparseSwinConfig
from sparseswin.nn import TransformerBlock, zero_projections
from sparseswin.regularizers import RegConfig, penalty
from sparseswin.rng import Rng
from sparseswin.swin import SwinBlock, WindowAttention, shift_mask, window_partition, window_reverse
from sparseswin.train import (
    Trainer,
    decode_checkpoint,
    encode_checkpoint,
    evaluate,
    load_checkpoint,
    restore_trainer,
    save_checkpoint,
    write_metrics,
)
from test_swin import region_oracle


def record(n: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def tiny_profile_trainer(seed=0, **train):
    cfg = load_run_config("tiny", env={})
    cfg = replace(cfg, train=replace(cfg.train, seed=seed, **train))
    train_ds, _ = load_datasets(cfg.data, cfg.train.seed)
    return Trainer(build(cfg.model, cfg.train.seed), train_ds, cfg.train, cfg.data.augment), cfg


# 1 ------------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite(seeds=10)
    seconds = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.worst)
    ok = all(r.passed for r in results) and seconds < 120
    record(1, ok, f"{len(results)} checks x 10 seeds, worst rel-err {worst.worst:.2e} ({worst.name}) "
                  f"< {TOLERANCE:g}, {seconds:.1f}s < 120s")


# 2 ------------------------------------------------------------------------------

def test_criterion_2_residual_identity():
    blk = TransformerBlock(32, 4, Rng(1))
    zero_projections(blk)
    s = Tensor(randn(0, 2, 16, 32).astype(np.float32))
    block_exact = np.array_equal(blk(s)[0].data, s.data)

    model = build(tiny_config(), 3)
    for b in model.sparta.blocks:
        zero_projections(b)
    x = Tensor(randn(1, 2, 64, 2, 2).astype(np.float32))
    sparta_exact = np.array_equal(model.sparta(x).tokens.data, model.sparta.converter(x).data)
    record(2, block_exact and sparta_exact,
           f"zero-projection block is identity: {block_exact}; SparTa equals converter: {sparta_exact}")


# 3 ------------------------------------------------------------------------------

def test_criterion_3_token_budget_invariance():
    cfg = SparseSwinConfig()
    a, b = count_flops(cfg, 224), count_flops(cfg, 448)
    ok = a.sparta_msa == b.sparta_msa and a.sparta_mlp == b.sparta_mlp and b.backbone > a.backbone
    record(3, ok, f"sparta_msa {a.sparta_msa} == {b.sparta_msa}, sparta_mlp {a.sparta_mlp} == {b.sparta_mlp}, "
                  f"backbone {a.backbone} < {b.backbone}")


# 4 ------------------------------------------------------------------------------

def test_criterion_4_parameter_accounting():
    tiny = count_params(build(tiny_config(), 0))
    default = count_params(build(SparseSwinConfig(), 0))
    tiny_ok = tiny.total == param_oracle.oracle(**param_oracle.TINY)["total"]
    default_ok = default.total == param_oracle.oracle(**param_oracle.DEFAULT)["total"]
    doc = default.to_json_dict()
    reported = ("17.58 M" in default.summary()
                and doc["reference/published_total"] == PUBLISHED_TOTAL_PARAMS
                and doc["reference/difference"] == default.total - PUBLISHED_TOTAL_PARAMS)
    record(4, tiny_ok and default_ok and reported,
           f"tiny {tiny.total:,} and default {default.total:,} match the oracle; "
           f"reference {PUBLISHED_TOTAL_PARAMS:,}, difference {default.total - PUBLISHED_TOTAL_PARAMS:+,} reported")


# 5 ------------------------------------------------------------------------------

def test_criterion_5_attention_capture():
    cfg = load_run_config("tiny", env={}).model
    model = build(cfg, 0)
    b = 3
    _, state = model.forward_with_state(Tensor(randn(5, b, 3, 64, 64).astype(np.float32)))
    row_err = max(float(np.abs(a.data.sum(-1) - 1).max()) for a in state.attn)
    lam = 1e-4
    got = penalty(state.attn, RegConfig("l1", lam)).item()
    want = lam * b * cfg.sparta.heads * cfg.sparta.loops * cfg.sparta.t
    rel = abs(got - want) / want
    record(5, row_err <= 1e-6 and rel <= 1e-6,
           f"max |row sum - 1| = {row_err:.1e} <= 1e-6; L1 {got:.9g} vs {want:.9g}, rel {rel:.1e} <= 1e-6")


# 6 ------------------------------------------------------------------------------

def test_criterion_6_desk_scale_convergence():
    t0 = time.perf_counter()
    tr, cfg = tiny_profile_trainer()
    first = tr.run(200)
    acc, _ = evaluate(tr.model, tr.ds, cfg.train.eval_batch, cfg.data.augment)
    seconds = time.perf_counter() - t0
    again = tiny_profile_trainer()[0].run(200)
    ok = acc >= 0.95 and seconds < 600 and first == again
    record(6, ok, f"training accuracy {acc:.4f} >= 0.95 after 200 steps in {seconds:.0f}s < 600s; "
                  f"rerun identical: {first == again}")


# 7 ------------------------------------------------------------------------------

def test_criterion_7_cifar_smoke(tmp_path):
    src_train = synthetic_dataset(10, 512, 32, seed=11)
    src_test = synthetic_dataset(10, 256, 32, seed=12)
    train_bin, test_bin = tmp_path / "data_batch_1.bin", tmp_path / "test_batch.bin"
    write_cifar(train_bin, src_train)
    write_cifar(test_bin, src_test)

    raw = np.fromfile(train_bin, dtype=np.uint8)
    ds = read_cifar(train_bin)
    rec = 3073
    offsets_ok = (len(raw) == 512 * rec
                  and np.array_equal(ds.labels, raw[::rec])
                  and all(ds.images[i, c, y, x] == raw[i * rec + 1 + c * 1024 + y * 32 + x]
                          for i, c, y, x in [(0, 0, 0, 0), (0, 2, 31, 31), (5, 1, 7, 19), (511, 0, 16, 3)]))

    base = load_run_config("tiny", env={}).to_dict()
    base["model"]["num_classes"] = 10
    base["data"] = {"source": "cifar10", "path": [str(train_bin)], "test_path": [str(test_bin)],
                    "n_train": 512, "n_test": 256, "augment": {"target_size": 64, "crop": "pad_crop"}}
    cfg = parse_run_config(base)
    train_ds, test_ds = load_datasets(cfg.data, cfg.train.seed)
    tr = Trainer(build(cfg.model, cfg.train.seed), train_ds, cfg.train, cfg.data.augment)
    losses = [r["loss"] for r in tr.run(100)]
    start, end = np.mean(losses[:10]), np.mean(losses[-10:])
    drop = 1 - end / start
    ok = offsets_ok and len(train_ds) == 512 and len(test_ds) == 256 and drop >= 0.20
    record(7, ok, f"reader byte offsets exact: {offsets_ok}; loss (10-step means) {start:.3f} -> {end:.3f}, "
                  f"decrease {drop:.1%} >= 20%")


# 8 ------------------------------------------------------------------------------

def test_criterion_8_regularizer_sweep(tmp_path, capsys):
    doc = load_run_config("tiny", env={}).to_dict()
    doc["data"].update(synthetic_train=64, synthetic_test=32)
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(doc))
    out = tmp_path / "sweep"
    code = cli.main(["sweep", "--config", str(cfg_path), "--steps", "5", "--out", str(out), "--json"])
    capsys.readouterr()
    files = sorted(out.glob("metrics_*.csv"))
    penalties = {}
    for f in files:
        lines = f.read_text().splitlines()
        col = lines[0].split(",").index("penalty")
        penalties[f.stem[len("metrics_"):]] = [float(line.split(",")[col]) for line in lines[1:]]
    ok = (code == 0 and len(files) == 5
          and all(v == 0.0 for v in penalties.get("none", [1.0]))
          and all(all(v > 0 for v in vals) for k, vals in penalties.items() if k != "none"))
    record(8, ok, f"{len(files)} metric files ({', '.join(penalties)}); penalty zero only for none")


# 9 ------------------------------------------------------------------------------

def test_criterion_9_determinism_and_checkpointing(tmp_path):
    a, b = tiny_profile_trainer(seed=4, batch=8), tiny_profile_trainer(seed=4, batch=8)
    write_metrics(tmp_path / "a.csv", a[0].run(6))
    write_metrics(tmp_path / "b.csv", b[0].run(6))
    csv_same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    straight = tiny_profile_trainer(seed=1, batch=8)[0].run(10)
    tr = tiny_profile_trainer(seed=1, batch=8)[0]
    tr.run(5)
    save_checkpoint(tmp_path / "c.sswn", tr)
    resumed = restore_trainer(load_checkpoint(tmp_path / "c.sswn"), tr.ds).run(5)
    resume_same = resumed[-1]["loss"] == straight[-1]["loss"]

    raw = (tmp_path / "c.sswn").read_bytes()
    save_checkpoint(tmp_path / "d.sswn", restore_trainer(decode_checkpoint(raw), tr.ds))
    bytes_same = encode_checkpoint(decode_checkpoint(raw)) == raw and (tmp_path / "d.sswn").read_bytes() == raw
    record(9, csv_same and resume_same and bytes_same,
           f"same-seed CSV identical: {csv_same}; 5+resume+5 final loss {resumed[-1]['loss']!r} == "
           f"{straight[-1]['loss']!r}: {resume_same}; checkpoint round trip byte-identical: {bytes_same}")


# 10 -----------------------------------------------------------------------------

def direct_window_msa(wa: WindowAttention, x: np.ndarray) -> np.ndarray:
    """Plain numpy MSA over one window with the relative position bias."""
    n, c = x.shape[-2:]
    heads, d = wa.heads, c // wa.heads
    qkv = x @ wa.attn.qkv.weight.data + wa.attn.qkv.bias.data
    q, k, v = (qkv[..., i * c:(i + 1) * c].reshape(-1, n, heads, d).transpose(0, 2, 1, 3) for i in range(3))
    bias = wa.rel_bias.data[wa.rel_index.reshape(-1)].reshape(n, n, heads).transpose(2, 0, 1)
    logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d) + bias
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    out = (p @ v).transpose(0, 2, 1, 3).reshape(-1, n, c)
    return out @ wa.attn.proj.weight.data + wa.attn.proj.bias.data


def test_criterion_10_swin_oracles():
    x = randn(0, 2, 14, 21, 5)
    inverse = np.array_equal(window_reverse(window_partition(Tensor(x), 7), 7, 14, 21).data, x)

    shapes = [(8, 8, 4, 2), (14, 14, 7, 3), (28, 28, 7, 3)]
    mask_ok = all(np.array_equal(shift_mask(*s), region_oracle(*s)) for s in shapes)

    wa = WindowAttention(8, 2, 7, Rng(5)).astype(np.float64)
    win = randn(1, 3, 49, 8)
    msa_ok = np.allclose(wa(Tensor(win))[0].data, direct_window_msa(wa, win), rtol=1e-12, atol=1e-13)

    blk = SwinBlock(8, 2, 7, 0, 7, Rng(4)).astype(np.float64)
    img = randn(2, 2, 7, 7, 8)
    z = img + direct_window_msa(blk.attn, blk.norm1(Tensor(img)).data.reshape(2, 49, 8)).reshape(img.shape)
    block_ok = np.allclose(blk(Tensor(img)).data, z + blk.mlp(blk.norm2(Tensor(z))).data, rtol=1e-12, atol=1e-13)
    record(10, inverse and mask_ok and msa_ok and block_ok,
           f"partition/reverse inverse: {inverse}; shift_mask == oracle on {len(shapes)} shapes: {mask_ok}; "
           f"single-window W-MSA == direct MSA: {msa_ok and block_ok}")


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-v", "-p", "no:cacheprovider"]))
