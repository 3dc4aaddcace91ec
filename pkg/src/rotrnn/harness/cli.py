"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 numeric failure
(non-finite loss, or a check that did not meet its bound).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from ..errors import CheckpointError, ConfigError, NumericError
from .config import PRESETS, load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _cmd_train(args) -> int:
    from .train import train_loop

    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.iters is not None:
        over["optim.iters"] = args.iters
    if over:
        cfg = cfg.replace(**over)
    res = train_loop(cfg, args.out or cfg.out_dir, verbose=args.verbose)
    print(json.dumps({"out_dir": str(res.out_dir), "steps": res.steps, "best_val_acc": res.best_val_acc,
                      "final_val_acc": res.final_val_acc, "reached_step": res.reached_step}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    from ..tasks import generate
    from .checkpoint import load_checkpoint
    from .train import evaluate

    cfg = load_config(args.config)
    model, manifest = load_checkpoint(args.checkpoint, expected_hash=cfg.hash())
    n = args.n or getattr(cfg.task, f"n_{args.split}")
    batch, labels = generate(cfg.task, args.split, 0, n)
    loss, acc, _, norms = evaluate(model, batch, labels)
    print(json.dumps({"split": args.split, "n": n, "loss": loss, "accuracy": acc,
                      "norms": [float(x) for x in norms], "step": manifest["meta"].get("step")}))
    return EXIT_OK


def _cmd_probe(args) -> int:
    from .probe import probe_norms

    res = probe_norms(args.gamma, args.T, args.batch, args.d_h, args.sub_batch, args.seed, args.c, args.lru)
    cols = ["t", "empirical", "analytic"] + (["lru_empirical", "lru_analytic"] if args.lru else [])
    lines = [",".join(cols)]
    for i in range(args.T):
        row = [i + 1, res.empirical[i], res.analytic[i]]
        if args.lru:
            row += [res.lru_empirical[i], res.lru_analytic[i]]
        lines.append(",".join(str(v) for v in row))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    ok = res.max_rel_dev < args.tol
    print(f"max relative deviation {res.max_rel_dev:.4f} ({'ok' if ok else 'FAIL'}, tolerance {args.tol})",
          file=sys.stderr)
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_check_grads(args) -> int:
    from ..grad import gradient_check
    from ..layer import SequenceBatch
    from ..model import ModelConfig, init_model

    worst, where = 0.0, ""
    for readout in ("pool", "last"):
        cfg = ModelConfig(d_in=6, n_classes=3, d_model=4, d_state=2 * args.d_h, n_heads=2, n_layers=2,
                          readout=readout, n_outputs=2, gamma_max=0.95, theta_max=np.pi)
        rng = np.random.default_rng(args.seed)
        model = init_model(cfg, rng)
        batch = SequenceBatch(rng.integers(0, 6, (3, args.T)))
        labels = rng.integers(0, 3, (3,) if readout == "pool" else (3, 2))
        errs = gradient_check(model, batch, labels)
        leaf = max(errs, key=errs.get)
        if errs[leaf] >= worst:
            worst, where = errs[leaf], f"{readout}:{leaf}"
    ok = worst < 1e-4
    print(f"max relative error {worst:.3e} at {where} ({'ok' if ok else 'FAIL'})")
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_bench(args) -> int:
    from .probe import bench_scan

    print(json.dumps(bench_scan(args.T, args.d_h, args.batch, args.workers, args.repeat, args.chunk, args.seed)))
    return EXIT_OK


def _cmd_export_config(args) -> int:
    cfg = PRESETS[args.preset]()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    text = cfg.to_json() + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rotrnn", description="RotRNN experiments on synthetic tasks")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--n", type=int)
    e.set_defaults(fn=_cmd_eval)

    pr = sub.add_parser("probe-norms", help="white-noise hidden-norm probe")
    pr.add_argument("--gamma", type=float, default=0.9)
    pr.add_argument("--T", type=int, default=512)
    pr.add_argument("--batch", type=int, default=8192)
    pr.add_argument("--d-h", dest="d_h", type=int, default=32)
    pr.add_argument("--sub-batch", type=int, default=512)
    pr.add_argument("--c", type=float, default=1.0)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--tol", type=float, default=0.05)
    pr.add_argument("--lru", action="store_true", help="also record a row-normalised LRU")
    pr.add_argument("--out", help="CSV path (default stdout)")
    pr.set_defaults(fn=_cmd_probe)

    g = sub.add_parser("check-grads", help="finite-difference gradient check")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--T", type=int, default=16)
    g.add_argument("--d-h", dest="d_h", type=int, default=4)
    g.set_defaults(fn=_cmd_check_grads)

    b = sub.add_parser("bench-scan", help="parallel vs sequential scan throughput")
    b.add_argument("--T", type=int, default=4096)
    b.add_argument("--d-h", dest="d_h", type=int, default=32)
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--workers", type=int, default=2)
    b.add_argument("--chunk", type=int)
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=_cmd_bench)

    x = sub.add_parser("export-config", help="write a config preset as JSON")
    x.add_argument("--preset", choices=sorted(PRESETS), default="default")
    x.add_argument("--seed", type=int)
    x.add_argument("--out")
    x.set_defaults(fn=_cmd_export_config)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, CheckpointError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
