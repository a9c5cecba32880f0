"""``sparseswin`` command line.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 data/checkpoint error, 4 numeric abort (NaN/Inf).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .errors import CheckpointError, ConfigError, DataError, NonFiniteError

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

SWEEP_ROWS = (("none", 0.0), ("l1", 1e-4), ("l1", 1e-5), ("l2", 1e-4), ("l2", 1e-5))

DEFAULTS_HELP = """\
config documents are JSON with three sections (unknown keys are rejected):
  model: input_size=224 patch=4 embed_dim=96 depths=[2,2,6] heads=[6,12,24]
         window=7 shift=3 mlp_ratio=4 qkv_bias=true num_classes=100 head_pool=mean_token
         sparta={t=49 e=512 heads=16 mlp_ratio=4 loops=2 qkv_bias=true
                 conv_kernel=3 conv_stride=1 share_weights=false}
  train: optimizer=adam lr=1e-4 weight_decay=0 betas=[0.9,0.999] eps=1e-8
         batch=128 steps=100 seed=0 freeze_stages=[] eval_batch=64
         reg={kind=none lambda=0 reduction=sum}
  data:  source=synthetic path=[] test_path=[] n_train=0 n_test=0 classes=4
         size=32 synthetic_train=256 synthetic_test=128
         augment={target_size=<model.input_size> hflip_prob=0.5
                  crop=random_resized scale_range=[0.08,1] ratio_range=[0.75,1.333]
                  pad=4 mean=[0.5,0.5,0.5] std=[0.5,0.5,0.5]}
shipped profiles: imagenet100, cifar, tiny (pass the name to --config)
environment: SPARSESWIN_SEED overrides train.seed
"""


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)


def cmd_describe(args, cfg) -> int:
    from .model import describe, format_chain

    desc = describe(cfg.model, args.input)
    if args.json:
        print(_dump(desc))
    else:
        for name, shape in desc["chain"]:
            print(f"{name:<12} {tuple(shape)}")
        print(format_chain(desc))
    return EXIT_OK


def cmd_params(args, cfg) -> int:
    from .model import build, count_params

    report = count_params(build(cfg.model, cfg.train.seed))
    text = report.to_json()
    if args.out:
        _write(args.out, text + "\n")
    print(text if args.json else report.summary())
    return EXIT_OK


def cmd_flops(args, cfg) -> int:
    from .model import count_flops

    report = count_flops(cfg.model, args.input)
    text = report.to_json()
    if args.out:
        _write(args.out, text + "\n")
    if args.json:
        print(text)
    else:
        for k, v in report.to_json_dict().items():
            print(f"{k:<17} {v:>16,}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import SUITES, format_results, run_suite

    groups = tuple(SUITES) if args.module == "all" else (args.module,)
    known = {name for g in groups for name, _ in SUITES[g]}
    if args.inject_fault is not None and args.inject_fault not in known:
        raise ConfigError(f"--inject-fault: no check named {args.inject_fault!r} in {', '.join(groups)}")
    results = run_suite(groups, seeds=args.seeds, fault=args.inject_fault)
    if args.json:
        print(_dump([{"check": r.name, "group": r.group, "worst_rel_err": r.worst, "passed": r.passed,
                      "tensor": r.worst_tensor, "index": list(r.worst_index)} for r in results]))
    else:
        print(format_results(results))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"gradcheck failed: {r.name} ({r.worst_tensor}{list(r.worst_index)}, rel-err {r.worst:.3e})",
              file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


def _apply_overrides(args, cfg):
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
    return cfg


def _train_run(cfg, out_dir: str, tag: str = "") -> tuple[float, list]:
    from .config import load_datasets
    from .model import build
    from .train import Trainer, evaluate, save_checkpoint, write_metrics

    train_ds, test_ds = load_datasets(cfg.data, cfg.train.seed)
    model = build(cfg.model, cfg.train.seed)
    trainer = Trainer(model, train_ds, cfg.train, cfg.data.augment)
    history = trainer.run(cfg.train.steps)
    os.makedirs(out_dir, exist_ok=True)
    write_metrics(os.path.join(out_dir, f"metrics{tag}.csv"), history)
    top1, loss = evaluate(model, test_ds, cfg.train.eval_batch, cfg.data.augment)
    save_checkpoint(os.path.join(out_dir, f"checkpoint{tag}.sswn"), trainer, extra={"eval": {"top1": top1}})
    return top1, history


def cmd_train(args, cfg) -> int:
    cfg = _apply_overrides(args, cfg)
    top1, history = _train_run(cfg, args.out)
    last = history[-1] if history else {}
    if args.json:
        print(_dump({"top1": top1, "steps": len(history), "final": last}))
    else:
        if last:
            print(f"step {last['step']}: loss={last['loss']:.6f} ce={last['ce']:.6f} "
                  f"penalty={last['penalty']:.6g} acc={last['acc']:.4f}")
        print(f"top1={top1!r}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .config import load_datasets
    from .train import evaluate, load_checkpoint, load_model

    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    model = load_model(load_checkpoint(args.checkpoint))
    if model.cfg != cfg.model:
        raise ConfigError("checkpoint model config differs from --config model section")
    _, test_ds = load_datasets(cfg.data, cfg.train.seed)
    top1, loss = evaluate(model, test_ds, cfg.train.eval_batch, cfg.data.augment)
    print(_dump({"top1": top1, "loss": loss}) if args.json else f"top1={top1!r}")
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    from .regularizers import RegConfig

    cfg = _apply_overrides(args, cfg)
    rows = []
    for kind, lam in SWEEP_ROWS:
        tag = "_none" if kind == "none" else f"_{kind}_{lam:.0e}"
        run = replace(cfg, train=replace(cfg.train, reg=RegConfig(kind, lam)))
        top1, history = _train_run(run, args.out, tag)
        last = history[-1] if history else {"penalty": 0.0, "loss": float("nan")}
        rows.append({"reg": kind, "lambda": lam, "top1": top1, "final_penalty": last["penalty"],
                     "final_loss": last["loss"], "metrics": f"metrics{tag}.csv"})
    with open(os.path.join(args.out, "sweep.csv"), "w") as fh:
        fh.write("reg,lambda,top1,final_penalty,final_loss,metrics\n")
        for r in rows:
            fh.write(f"{r['reg']},{r['lambda']!r},{r['top1']!r},{r['final_penalty']!r},{r['final_loss']!r},"
                     f"{r['metrics']}\n")
    if args.json:
        print(_dump(rows))
    else:
        print(f"{'model':<22} {'lambda':>8} {'top1':>8} {'penalty':>12}")
        for r in rows:
            name = "SparseSwin" if r["reg"] == "none" else f"SparseSwin with {r['reg'].upper()}"
            lam = "-" if r["reg"] == "none" else f"{r['lambda']:.0e}"
            print(f"{name:<22} {lam:>8} {r['top1']:>8.4f} {r['final_penalty']:>12.6g}")
    return EXIT_OK


COMMANDS = {
    "describe": cmd_describe,
    "params": cmd_params,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def _write(path: str, text: str) -> None:
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sparseswin",
        description="SparseSwin model description, cost reports, gradient checks, training and evaluation.",
        epilog=DEFAULTS_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", default="tiny", help="config JSON path or profile name (default: tiny)")
    p.add_argument("--input", type=int, default=None, help="input size for describe/flops (default: model.input_size)")
    p.add_argument("--checkpoint", default=None, help="checkpoint file for eval")
    p.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    p.add_argument("--out", default=None, help="output directory (train/sweep, default runs/) or report file")
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.add_argument("--module", default="all", choices=["all", "tensor", "backbone", "sparta"],
                   help="gradcheck subset")
    p.add_argument("--seeds", type=int, default=10, help="gradcheck seeds per check")
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("train", "sweep") and args.out is None:
        args.out = "runs"
    try:
        from .config import load_run_config

        cfg = load_run_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
