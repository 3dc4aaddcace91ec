"""Sequence classifier built from RotRNN blocks.

    encoder -> L x [x + GLU(GELU(RotRNN(BatchNorm(x))))] -> readout -> classifier

Readout is either a masked mean over valid timesteps (``"pool"``) or the last
``n_outputs`` valid positions read out separately (``"last"``), which is what
the copy task needs.

Parameters live in a flat ``{name: array}`` dict so optimisers, gradient
checks and checkpoints can treat every leaf the same way. Batch-norm running
statistics are kept apart in ``ModelParams.state``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .layer import RotRNNLayerParams, SequenceBatch, init_layer, layer_apply

RNN_LEAVES = ("m", "thetas", "gamma_log", "b", "c_out", "d_skip")


@dataclass(frozen=True)
class ModelConfig:
    d_in: int  # vocabulary size for token input, feature width otherwise
    n_classes: int
    d_model: int = 128
    d_state: int = 256
    n_heads: int = 32
    n_layers: int = 6
    tokens: bool = True
    readout: str = "pool"
    n_outputs: int = 1
    dropout: float = 0.0
    gamma_min: float = 0.5
    gamma_max: float = 0.999
    theta_max: float = np.pi / 100
    c: float = 1.0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.readout not in ("pool", "last"):
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.n_layers < 0 or self.d_in < 1 or self.n_classes < 2 or self.n_outputs < 1:
            raise ConfigError("invalid model geometry")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BatchNormState:
    mean: np.ndarray
    var: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray] = field(default_factory=dict)

    def layer(self, i: int) -> RotRNNLayerParams:
        return RotRNNLayerParams(**{k: self.params[f"blocks.{i}.rnn.{k}"] for k in RNN_LEAVES})

    def batchnorm(self, i: int) -> BatchNormState:
        cfg = self.config
        return BatchNormState(
            self.state[f"blocks.{i}.norm.mean"],
            self.state[f"blocks.{i}.norm.var"],
            self.params[f"blocks.{i}.norm.scale"],
            self.params[f"blocks.{i}.norm.shift"],
            cfg.bn_momentum,
            cfg.bn_eps,
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, {k: v.copy() for k, v in self.params.items()}, {k: v.copy() for k, v in self.state.items()}
        )


def init_model(config: ModelConfig, seed) -> ModelParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    D = config.d_model
    enc_std = 1.0 if config.tokens else 1.0 / np.sqrt(config.d_in)
    params = {
        "encoder.w": rng.normal(size=(config.d_in, D)) * enc_std,
        "encoder.b": np.zeros(D),
    }
    state = {}
    for i in range(config.n_layers):
        pre = f"blocks.{i}"
        params[f"{pre}.norm.scale"] = np.ones(D)
        params[f"{pre}.norm.shift"] = np.zeros(D)
        state[f"{pre}.norm.mean"] = np.zeros(D)
        state[f"{pre}.norm.var"] = np.ones(D)
        layer = init_layer(
            rng, D, config.d_state, config.n_heads, config.gamma_min, config.gamma_max, config.theta_max
        )
        for k, v in layer.as_dict().items():
            params[f"{pre}.rnn.{k}"] = v
        params[f"{pre}.mlp.w_a"] = rng.normal(size=(D, D)) / np.sqrt(D)
        params[f"{pre}.mlp.b_a"] = np.zeros(D)
        params[f"{pre}.mlp.w_g"] = rng.normal(size=(D, D)) / np.sqrt(D)
        params[f"{pre}.mlp.b_g"] = np.zeros(D)
    params["classifier.w"] = rng.normal(size=(D, config.n_classes)) / np.sqrt(D)
    params["classifier.b"] = np.zeros(config.n_classes)
    return ModelParams(config, params, state)


# --- elementwise pieces -----------------------------------------------------

_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + 0.044715 * x * x * x)))


def gelu_grad(x):
    t = np.tanh(_GELU_K * (x + 0.044715 * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- forward ----------------------------------------------------------------


def encode(model: ModelParams, batch: SequenceBatch) -> np.ndarray:
    cfg = model.config
    w, b = model.params["encoder.w"], model.params["encoder.b"]
    if cfg.tokens:
        if not batch.is_tokens:
            raise InputError("model expects integer tokens")
        tok = batch.data
        if tok.min() < 0 or tok.max() >= cfg.d_in:
            raise InputError(f"token outside vocabulary [0, {cfg.d_in})")
        return w[tok] + b
    if batch.is_tokens or batch.data.ndim != 3 or batch.data.shape[-1] != cfg.d_in:
        raise InputError(f"model expects (batch, T, {cfg.d_in}) features")
    return batch.data @ w + b


def batchnorm_forward(x, mask, bn: BatchNormState, train: bool):
    """Per-channel normalisation over valid (batch, time) positions.

    Returns ``(out, cache, new_mean, new_var)``; running statistics are only
    advanced in train mode.
    """
    if train:
        wsum = mask.sum()
        mean = np.einsum("bt,btc->c", mask, x) / wsum
        xc = x - mean
        var = np.einsum("bt,btc->c", mask, xc * xc) / wsum
        new_mean = bn.momentum * bn.mean + (1 - bn.momentum) * mean
        new_var = bn.momentum * bn.var + (1 - bn.momentum) * var
    else:
        mean, var = bn.mean, bn.var
        xc = x - mean
        new_mean, new_var = bn.mean, bn.var
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = xc * inv
    out = xhat * bn.scale + bn.shift
    cache = {"xhat": xhat, "inv": inv, "mask": mask, "train": train, "scale": bn.scale}
    return out, cache, new_mean, new_var


def block_forward(model: ModelParams, i: int, x, mask, train_mode: bool, rng=None):
    """One residual block. Returns ``(out, cache, new_bn_stats)``."""
    pre = f"blocks.{i}"
    p = model.params
    z, bn_cache, new_mean, new_var = batchnorm_forward(x, mask, model.batchnorm(i), train_mode)
    layer = model.layer(i)
    y, rnn_cache = layer_apply(layer, z, model.config.c)
    h = gelu(y)
    keep = None
    rate = model.config.dropout
    if train_mode and rate > 0:
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        keep = (rng.uniform(size=h.shape) >= rate) / (1.0 - rate)
        h = h * keep
    a = h @ p[f"{pre}.mlp.w_a"] + p[f"{pre}.mlp.b_a"]
    g = sigmoid(h @ p[f"{pre}.mlp.w_g"] + p[f"{pre}.mlp.b_g"])
    out = x + a * g
    cache = {
        "bn": bn_cache,
        "z": z,
        "rnn": rnn_cache,
        "layer": layer,
        "y": y,
        "h": h,
        "keep": keep,
        "a": a,
        "g": g,
    }
    return out, cache, (new_mean, new_var)


def readout_positions(batch: SequenceBatch, n_outputs: int) -> np.ndarray:
    """(batch, n_outputs) indices of the last valid positions."""
    ends = batch.lengths if batch.lengths is not None else np.full(batch.batch, batch.T)
    idx = ends[:, None] - n_outputs + np.arange(n_outputs)[None, :]
    if idx.min() < 0:
        raise DimensionError("sequence shorter than the number of read-out positions")
    return idx


def forward_with_cache(model: ModelParams, batch: SequenceBatch, train_mode: bool = False, rng=None):
    """Logits plus everything needed for the backward pass.

    Returns ``(logits, cache, new_state)``; ``new_state`` holds the advanced
    batch-norm statistics (equal to the old ones in eval mode).
    """
    cfg = model.config
    p = model.params
    mask = batch.mask()
    h = encode(model, batch)
    blocks = []
    new_state = dict(model.state)
    norms = []
    for i in range(cfg.n_layers):
        h, cache, (mean, var) = block_forward(model, i, h, mask, train_mode, rng)
        new_state[f"blocks.{i}.norm.mean"] = mean
        new_state[f"blocks.{i}.norm.var"] = var
        blocks.append(cache)
        norms.append(_mean_head_norm(cache["rnn"]["s"], mask))
    if cfg.readout == "pool":
        denom = mask.sum(axis=1, keepdims=True)
        feats = np.einsum("bt,btc->bc", mask, h) / denom
        idx = None
    else:
        idx = readout_positions(batch, cfg.n_outputs)
        feats = np.take_along_axis(h, idx[:, :, None], axis=1)
    logits = feats @ p["classifier.w"] + p["classifier.b"]
    cache = {"batch": batch, "mask": mask, "blocks": blocks, "h_final": h, "feats": feats, "idx": idx, "norms": norms}
    return logits, cache, new_state


def _mean_head_norm(s, mask):
    # P is orthogonal, so rotated-basis norms equal hidden-state norms
    per = np.linalg.norm(s, axis=-1).mean(axis=-1)  # (T, B)
    m = mask.T
    return float((per * m).sum() / m.sum())


def model_forward(model: ModelParams, batch: SequenceBatch, train_mode: bool = False, rng=None) -> np.ndarray:
    """Logits; in train mode the batch-norm running statistics are updated in place."""
    logits, _, new_state = forward_with_cache(model, batch, train_mode, rng)
    if train_mode:
        model.state = new_state
    return logits


def hidden_norms(model: ModelParams, batch: SequenceBatch, t_buckets: int = 1):
    """Per-layer mean hidden-state norm, bucketed over time.

    Returns an (L, t_buckets) array. The statistic is the mean over batch,
    timesteps in the bucket, and heads of the per-head norm ``||x_t^(h)||_2``.
    """
    _, cache, _ = forward_with_cache(model, batch, False)
    return bucket_norms(cache, t_buckets)


def bucket_norms(cache, t_buckets: int = 1):
    """``hidden_norms`` from an existing ``forward_with_cache`` cache."""
    mask = cache["mask"]
    T = mask.shape[1]
    edges = np.linspace(0, T, t_buckets + 1).astype(int)
    out = np.zeros((len(cache["blocks"]), t_buckets))
    for i, blk in enumerate(cache["blocks"]):
        per = np.linalg.norm(blk["rnn"]["s"], axis=-1).mean(axis=-1).T  # (B, T)
        for j in range(t_buckets):
            sl = slice(edges[j], edges[j + 1])
            out[i, j] = (per[:, sl] * mask[:, sl]).sum() / max(mask[:, sl].sum(), 1.0)
    return out


def cross_entropy_loss(logits, labels, weights=None):
    """Mean softmax cross-entropy and accuracy.

    ``logits`` is (..., C) and ``labels`` the matching integer array; optional
    ``weights`` masks individual predictions.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    C = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise InputError(f"label outside [0, {C})")
    w = np.ones(labels.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, labels[..., None], axis=-1)[..., 0]
    wsum = w.sum()
    loss = float(((logz - picked) * w).sum() / wsum)
    acc = float(((logits.argmax(axis=-1) == labels) * w).sum() / wsum)
    return loss, acc
