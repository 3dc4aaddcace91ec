"""Hand-written reverse-mode gradients, finite-difference checks and Adam.

Each forward piece in ``layer`` / ``model`` keeps a cache; the functions here
walk those caches backwards. The recurrence adjoint is itself a scan run in
reverse time with negated angles (Theta^T = Theta(-theta)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError
from .layer import RotRNNLayerParams, layer_apply
from .model import (
    RNN_LEAVES,
    ModelParams,
    cross_entropy_loss,
    forward_with_cache,
    gelu_grad,
)
from .rotor import expm_frechet, skew, theta_apply
from .scan import ScanElement, scan

RECURRENT_LEAVES = ("rnn.m", "rnn.thetas", "rnn.gamma_log", "rnn.b")


def is_recurrent(name: str) -> bool:
    return name.endswith(RECURRENT_LEAVES)


# --- RotRNN layer -----------------------------------------------------------


def _rotated_vjp(params: RotRNNLayerParams, cache, gs, g_p, couple_xi: bool = True):
    """Pull ``gs`` (T, B, H, D_h), the gradient w.r.t. the rotated-basis states,
    back to the head parameters and the layer input.

    ``g_p`` is the gradient w.r.t. P collected downstream of the scan.
    ``couple_xi=False`` treats xi as a constant; that variant is deliberately
    wrong and only exists so tests can show the coupling matters.
    """
    ut, p, s = cache["ut"], cache["p"], cache["s"]
    gamma, xi, b_norm, e_in, c = cache["gamma"], cache["xi"], cache["b_norm"], cache["e_in"], cache["c"]
    T, B, H, d_h = s.shape
    d_u = ut.shape[1]
    thetas = params.thetas

    rev = ScanElement(
        np.broadcast_to(gamma, (T, 1, H)),
        np.broadcast_to(-thetas[None, None], (T, 1, H, d_h // 2)),
        gs[::-1],
    )
    adj = scan(rev).state[::-1]  # dL/ds_t through every later step

    s_prev = np.concatenate([np.zeros((1,) + s.shape[1:]), s[:-1]], axis=0)
    r = theta_apply(thetas[None, None], 1, s_prev)
    g_gamma = np.einsum("tbhi,tbhi->h", adj, r, optimize=True)
    # d/dtheta of a 2x2 rotation is the rotation by theta + pi/2: (x, y) -> (-y, x)
    g_thetas = gamma[:, None] * (adj[..., 1::2] * r[..., 0::2] - adj[..., 0::2] * r[..., 1::2]).sum(axis=(0, 1))

    # v = P^T (xi B) u
    af = adj.reshape(T * B, H * d_h)
    g_in = (ut.T @ af).reshape(d_u, H, d_h).transpose(1, 0, 2)  # (H, D_u, D_h)
    g_p = g_p + np.matmul(b_norm, g_in)
    g_bnorm = np.matmul(p, np.swapaxes(g_in, 1, 2))
    gu = np.swapaxes((af @ e_in.T).reshape(T, B, d_u), 0, 1)

    g_xi = np.sum(g_bnorm * params.b, axis=(1, 2))
    g_b = xi[:, None, None] * g_bnorm
    if couple_xi:
        tau = np.sum(params.b**2, axis=(1, 2))
        g_b += (g_xi * -xi / tau)[:, None, None] * params.b
        g_gamma = g_gamma + g_xi * (-c * gamma / (xi * tau))
    g_gamma_log = g_gamma * -np.exp(params.gamma_log) * gamma

    # P = exp(S), S = M - M^T; the adjoint of L(S, .) is L(S^T, .)
    _, g_s = expm_frechet(-skew(params.m), g_p)
    g_m = g_s - np.swapaxes(g_s, -1, -2)
    return {"m": g_m, "thetas": g_thetas, "gamma_log": g_gamma_log, "b": g_b}, gu


def layer_vjp(params: RotRNNLayerParams, cache, gy, couple_xi: bool = True):
    """Gradients of a scalar loss through the layer.

    ``cache`` comes from ``layer.layer_apply`` on the same input; ``gy`` is
    the (B, T, D_u) output gradient. Returns ``(grads, gu)``.
    """
    u, s, p = cache["u"], cache["s"], cache["p"]
    T, B, H, d_h = s.shape
    d_u = u.shape[-1]
    gyf = np.ascontiguousarray(np.swapaxes(gy, 0, 1)).reshape(T * B, d_u)
    g_out = (gyf.T @ s.reshape(T * B, H * d_h)).reshape(d_u, H, d_h).transpose(1, 0, 2)  # (H, D_u, D_h)
    c_heads = params.c_out.reshape(d_u, H, d_h).transpose(1, 0, 2)
    grads = {
        # y = C_h P_h s_h, so dC_h = (sum gy s^T) P_h^T and dP_h = C_h^T (sum gy s^T)
        "c_out": np.matmul(g_out, np.swapaxes(p, 1, 2)).transpose(1, 0, 2).reshape(d_u, H * d_h),
        "d_skip": np.einsum("btj,btj->j", gy, u),
    }
    g_p = np.matmul(np.swapaxes(c_heads, 1, 2), g_out)
    gs = (gyf @ cache["f_out"]).reshape(T, B, H, d_h)
    g_heads, gu = _rotated_vjp(params, cache, gs, g_p, couple_xi)
    grads.update(g_heads)
    return grads, gu + gy * params.d_skip


def layer_loss_and_grads(params: RotRNNLayerParams, u, loss_grad, c: float = 1.0):
    """Run the layer on ``u`` and backpropagate ``loss_grad(y)``, a callable
    returning ``(loss, dloss/dy)``. Returns ``(loss, grads, gu)``."""
    y, cache = layer_apply(params, u, c)
    loss, gy = loss_grad(y)
    grads, gu = layer_vjp(params, cache, gy)
    return loss, grads, gu


# --- full model -------------------------------------------------------------


def _softmax_xent_grad(logits, labels, weights):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    prob = np.exp(shifted)
    prob /= prob.sum(axis=-1, keepdims=True)
    onehot = np.zeros_like(prob)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    return (prob - onehot) * (weights / weights.sum())[..., None]


def _batchnorm_vjp(cache, gout):
    xhat, inv, mask, scale = cache["xhat"], cache["inv"], cache["mask"], cache["scale"]
    g_scale = np.einsum("btc,btc->c", gout, xhat)
    g_shift = gout.sum(axis=(0, 1))
    gxhat = gout * scale
    if not cache["train"]:
        return gxhat * inv, g_scale, g_shift
    wsum = mask.sum()
    s1 = gxhat.sum(axis=(0, 1))
    s2 = np.einsum("btc,btc->c", gxhat, xhat)
    gx = inv * (gxhat - mask[..., None] / wsum * (s1 + xhat * s2))
    return gx, g_scale, g_shift


@dataclass
class LossResult:
    loss: float
    accuracy: float
    grads: dict[str, np.ndarray]
    new_state: dict[str, np.ndarray]
    norms: list[float]


def loss_and_grads(
    model: ModelParams,
    batch,
    labels,
    weights=None,
    train_mode: bool = True,
    rng=None,
    couple_xi: bool = True,
) -> LossResult:
    cfg = model.config
    p = model.params
    logits, cache, new_state = forward_with_cache(model, batch, train_mode, rng)
    labels = np.asarray(labels)
    w = np.ones(labels.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    loss, acc = cross_entropy_loss(logits, labels, w)
    if not np.isfinite(loss):
        norms = {k: float(np.linalg.norm(v)) for k, v in p.items()}
        raise NumericError(f"non-finite loss {loss}; parameter norms: {norms}")

    grads: dict[str, np.ndarray] = {}
    glog = _softmax_xent_grad(logits, labels, w)
    feats = cache["feats"]
    grads["classifier.w"] = feats.reshape(-1, feats.shape[-1]).T @ glog.reshape(-1, glog.shape[-1])
    grads["classifier.b"] = glog.reshape(-1, glog.shape[-1]).sum(axis=0)
    gfeats = glog @ p["classifier.w"].T

    h = cache["h_final"]
    gh = np.zeros_like(h)
    mask = cache["mask"]
    if cfg.readout == "pool":
        gh = mask[..., None] / mask.sum(axis=1)[:, None, None] * gfeats[:, None, :]
    else:
        np.put_along_axis(gh, cache["idx"][:, :, None], gfeats, axis=1)

    for i in reversed(range(cfg.n_layers)):
        blk = cache["blocks"][i]
        pre = f"blocks.{i}"
        ga = gh * blk["g"]
        gpre = gh * blk["a"] * blk["g"] * (1 - blk["g"])
        hh = blk["h"]
        grads[f"{pre}.mlp.w_a"] = np.einsum("btc,btd->cd", hh, ga)
        grads[f"{pre}.mlp.b_a"] = ga.sum(axis=(0, 1))
        grads[f"{pre}.mlp.w_g"] = np.einsum("btc,btd->cd", hh, gpre)
        grads[f"{pre}.mlp.b_g"] = gpre.sum(axis=(0, 1))
        ghh = ga @ p[f"{pre}.mlp.w_a"].T + gpre @ p[f"{pre}.mlp.w_g"].T
        if blk["keep"] is not None:
            ghh = ghh * blk["keep"]
        gy = ghh * gelu_grad(blk["y"])
        g_rnn, gz = layer_vjp(blk["layer"], blk["rnn"], gy, couple_xi)
        for k in RNN_LEAVES:
            grads[f"{pre}.rnn.{k}"] = g_rnn[k]
        gx, g_scale, g_shift = _batchnorm_vjp(blk["bn"], gz)
        grads[f"{pre}.norm.scale"] = g_scale
        grads[f"{pre}.norm.shift"] = g_shift
        gh = gh + gx

    b = cache["batch"]
    grads["encoder.b"] = gh.sum(axis=(0, 1))
    if cfg.tokens:
        g_enc = np.zeros_like(p["encoder.w"])
        np.add.at(g_enc, b.data.reshape(-1), gh.reshape(-1, gh.shape[-1]))
        grads["encoder.w"] = g_enc
    else:
        grads["encoder.w"] = np.einsum("btc,btd->cd", b.data, gh)

    grads = {k: grads[k] for k in p}  # parameter order
    return LossResult(loss, acc, grads, new_state, cache["norms"])


def backward(model: ModelParams, batch, labels, weights=None, train_mode: bool = True, rng=None):
    """``(loss, grads)`` with one gradient array per parameter leaf."""
    res = loss_and_grads(model, batch, labels, weights, train_mode, rng)
    return res.loss, res.grads


# --- finite differences -----------------------------------------------------


def model_loss(model: ModelParams, batch, labels, weights=None, train_mode: bool = True) -> float:
    logits, _, _ = forward_with_cache(model, batch, train_mode)
    return cross_entropy_loss(logits, labels, weights)[0]


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def finite_difference_grads(loss_fn, params: dict[str, np.ndarray], h: float = 1e-5, leaves=None):
    """Central differences of ``loss_fn()`` w.r.t. every entry of the chosen
    leaves. ``params`` is perturbed in place and restored."""
    out = {}
    for name in leaves or list(params):
        arr = params[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_fn()
            flat[j] = orig - h
            down = loss_fn()
            flat[j] = orig
            gflat[j] = (up - down) / (2 * h)
        out[name] = g
    return out


def gradient_check(model: ModelParams, batch, labels, weights=None, h: float = 1e-5, train_mode: bool = True):
    """Per-leaf max relative error between analytic and central-difference
    gradients."""
    res = loss_and_grads(model, batch, labels, weights, train_mode)
    work = model.copy()
    fd = finite_difference_grads(lambda: model_loss(work, batch, labels, weights, train_mode), work.params, h)
    return {k: relative_error(res.grads[k], fd[k]) for k in res.grads}


# --- optimiser --------------------------------------------------------------


@dataclass
class OptimState:
    mu: dict[str, np.ndarray]
    nu: dict[str, np.ndarray]
    step: int = 0
    groups: dict[str, str] = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, np.ndarray]) -> "OptimState":
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
            0,
            {k: ("recurrent" if is_recurrent(k) else "global") for k in params},
        )


def adam_step(
    opt: OptimState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    glr: float,
    lr: float,
    weight_decay: float,
    b1: float = 0.9,
    b2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = None,
):
    """One Adam update with two groups.

    Recurrent leaves (m, thetas, gamma_log, b of each RotRNN layer) use
    ``lr`` and no weight decay; everything else uses ``glr`` with decoupled
    weight decay. Returns ``(new_params, new_opt)``.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise DimensionError(f"gradient for {k} has shape {g.shape}, expected {params[k].shape}")
    if clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > clip_norm:
            grads = {k: g * (clip_norm / total) for k, g in grads.items()}
    step = opt.step + 1
    c1 = 1 - b1**step
    c2 = 1 - b2**step
    new_params, mu, nu = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        mu[k] = b1 * opt.mu[k] + (1 - b1) * g
        nu[k] = b2 * opt.nu[k] + (1 - b2) * g * g
        upd = (mu[k] / c1) / (np.sqrt(nu[k] / c2) + eps)
        if opt.groups[k] == "recurrent":
            new_params[k] = p - lr * upd
        else:
            new_params[k] = p - glr * upd - glr * weight_decay * p
    return new_params, OptimState(mu, nu, step, dict(opt.groups))

