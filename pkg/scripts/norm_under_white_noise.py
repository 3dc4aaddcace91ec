"""Compare a checkpoint's hidden norms on copy-task inputs with the same
layers driven by white noise.

    python scripts/norm_under_white_noise.py runs/copy/checkpoints/final

The normalisation only promises E||x_t||^2 = 1 for i.i.d. unit-variance
input; this shows how far the task input is from that regime.
"""

import sys

import numpy as np

from rotrnn.harness.checkpoint import load_checkpoint
from rotrnn.layer import rotated_states
from rotrnn.model import forward_with_cache
from rotrnn.tasks import TaskSpec, gen_copy_task


def main(path):
    model, _ = load_checkpoint(path)
    spec = TaskSpec(kind="copy", T=256, vocab=8, pattern_len=model.config.n_outputs)
    batch, _ = gen_copy_task(spec, "val", 0, 256)
    _, cache, _ = forward_with_cache(model, batch, False)
    u = np.random.default_rng(0).standard_normal((256, spec.T, model.config.d_model))
    for i, blk in enumerate(cache["blocks"]):
        s, _ = rotated_states(model.layer(i), u, model.config.c)
        white = np.linalg.norm(s, axis=-1).mean()
        energy = (blk["z"] ** 2).sum(axis=-1).mean(axis=0)
        top = np.sort(energy)[::-1][: spec.pattern_len + 1].sum() / energy.sum()
        print(f"layer {i}: copy-input norm {cache['norms'][i]:.3f}, white-noise norm {white:.3f}, "
              f"input energy in top {spec.pattern_len + 1} positions {top:.2f}")


if __name__ == "__main__":
    main(sys.argv[1])
