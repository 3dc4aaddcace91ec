"""Training loop and run artifacts.

A run directory holds

    config.json        the resolved experiment config
    metrics.jsonl      one record per log step (no wall-clock, so reruns with
                       the same seed are byte-identical)
    timing.jsonl       wall-clock per log step
    norms.csv          step, layer, t_bucket, mean_norm
    checkpoints/{init,best,final}/

Training batches are consecutive index windows of the task's train split,
so the whole data order is a function of the config.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, NumericError
from ..grad import OptimState, adam_step, loss_and_grads
from ..model import bucket_norms, cross_entropy_loss, forward_with_cache, init_model
from ..tasks import generate
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, lr_at


@dataclass
class RunResult:
    out_dir: Path
    steps: int = 0
    best_val_acc: float = float("nan")
    final_val_acc: float = float("nan")
    reached_step: int | None = None  # first log step with val acc >= stop_at_val_acc
    records: list = field(default_factory=list)


def evaluate(model, batch, labels, t_buckets: int = 1):
    """Eval-mode loss, accuracy and (L, t_buckets) hidden norms on one batch."""
    logits, cache, _ = forward_with_cache(model, batch, False)
    loss, acc = cross_entropy_loss(logits, labels)
    return loss, acc, bucket_norms(cache, t_buckets), cache["norms"]


def _train_window(cfg: ExperimentConfig, step: int) -> int:
    bs, n = cfg.optim.batch, cfg.task.n_train
    if n < bs:
        raise ConfigError(f"train split ({n}) is smaller than one batch ({bs})")
    return (step * bs) % (n - n % bs)


def _dump_diagnostics(out: Path, step: int, model, err: Exception):
    diag = {
        "step": step,
        "error": str(err).split(";")[0],
        "param_norms": {k: float(np.linalg.norm(v)) for k, v in model.params.items()},
        "param_finite": {k: bool(np.all(np.isfinite(v))) for k, v in model.params.items()},
    }
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")


def train_loop(cfg: ExperimentConfig, out_dir=None, verbose: bool = False) -> RunResult:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoints"
    (out / "config.json").write_text(cfg.to_json() + "\n")
    chash = cfg.hash()

    mcfg = cfg.model_config()
    model = init_model(mcfg, np.random.default_rng([cfg.seed, 0]))
    drop_rng = np.random.default_rng([cfg.seed, 1])
    opt = OptimState.create(model.params)
    save_checkpoint(ckpt / "init", model, chash, {"step": 0})
    result = RunResult(out)
    o, lg = cfg.optim, cfg.log
    if o.iters == 0:
        return result

    vb, vl = generate(cfg.task, "val", 0, lg.n_eval)
    files = {k: open(out / name, "w") for k, name in
             (("metrics", "metrics.jsonl"), ("timing", "timing.jsonl"), ("norms", "norms.csv"))}
    files["norms"].write("step,layer,t_bucket,mean_norm\n")
    t0 = time.perf_counter()

    def log(step, train_loss, train_acc, lr_mult):
        val_loss, val_acc, buckets, norms = evaluate(model, vb, vl, lg.t_buckets)
        rec = {
            "step": step,
            "lr_mult": lr_mult,
            "train_loss": train_loss,
            "train_acc": train_acc,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "norms": [float(n) for n in norms],
        }
        files["metrics"].write(json.dumps(rec, sort_keys=True) + "\n")
        files["timing"].write(json.dumps({"step": step, "elapsed_s": round(time.perf_counter() - t0, 3)}) + "\n")
        for i, row in enumerate(buckets):
            for j, v in enumerate(row):
                files["norms"].write(f"{step},{i},{j},{float(v)!r}\n")
        for f in files.values():
            f.flush()
        result.records.append(rec)
        if verbose:
            tl = "-" if train_loss is None else f"{train_loss:.4f}"
            print(f"step {step:6d} loss {tl} val_acc {val_acc:.4f} norms {np.round(norms, 3).tolist()}", flush=True)
        return val_acc

    try:
        log(0, None, None, lr_at(o, 0))
        best = -1.0
        for step in range(o.iters):
            batch, labels = generate(cfg.task, "train", _train_window(cfg, step), o.batch)
            try:
                res = loss_and_grads(model, batch, labels, train_mode=True, rng=drop_rng)
            except NumericError as e:
                _dump_diagnostics(out, step, model, e)
                raise
            model.state = res.new_state
            mult = lr_at(o, step)
            model.params, opt = adam_step(
                opt, model.params, res.grads, o.glr * mult, o.lr * mult, o.weight_decay, clip_norm=o.clip_norm
            )
            result.steps = step + 1
            if (step + 1) % lg.log_every and step + 1 != o.iters:
                continue
            acc = log(step + 1, res.loss, res.accuracy, mult)
            result.final_val_acc = acc
            if acc > best:
                best = acc
                save_checkpoint(ckpt / "best", model, chash, {"step": step + 1, "val_acc": acc})
            if lg.stop_at_val_acc is not None and acc >= lg.stop_at_val_acc:
                result.reached_step = step + 1
                break
        result.best_val_acc = best
    finally:
        for f in files.values():
            f.close()
    save_checkpoint(ckpt / "final", model, chash, {"step": result.steps})
    return result
