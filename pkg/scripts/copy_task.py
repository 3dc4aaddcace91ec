"""Train the copy-task smoke configuration and summarise the run.

    python scripts/copy_task.py --out runs/copy [--seed 0] [--iters N]

Prints one line per log step and, at the end, the step at which validation
recall reached the target and the range of the per-layer hidden norms.
"""

import argparse
import json

import numpy as np

from rotrnn.harness.config import copy_task_config
from rotrnn.harness.train import train_loop


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/copy")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iters", type=int)
    args = ap.parse_args()

    over = {"seed": args.seed}
    if args.iters is not None:
        over["optim.iters"] = args.iters
    cfg = copy_task_config(**over)
    res = train_loop(cfg, args.out, verbose=True)
    norms = np.array([r["norms"] for r in res.records])
    print(json.dumps({
        "reached_step": res.reached_step,
        "final_val_acc": res.final_val_acc,
        "norm_min": float(norms.min()),
        "norm_max": float(norms.max()),
    }))


if __name__ == "__main__":
    main()
