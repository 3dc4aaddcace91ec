"""Reference diagonal complex recurrence (LRU) and the embedding of a
two-dimensional-head RotRNN layer into it.

Complex numbers are kept as explicit (real, imaginary) array pairs, so the
2x2 rotation blocks of a RotRNN head line up one-to-one with the arithmetic
below.

Embedding. A head with D_h = 2 evolves z = P^T x by z' = gamma Theta(theta) z
+ xi P^T B u. Theta(theta) has eigenvectors (1, -i)/sqrt2 and (1, i)/sqrt2
with eigenvalues exp(+-i theta), so with

    U = [[1, 1], [-i, i]] / sqrt2,      x~ = U^H z

each head becomes one conjugate pair of diagonal modes
(gamma e^{i theta}, gamma e^{-i theta}) with B~ = U^H P^T xi B and
C~ = C P U. The imaginary parts of the pair cancel in C~ x~.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .layer import RotRNNLayerParams, _as_array, _xi
from .rotor import make_p


@dataclass(frozen=True)
class LRUParams:
    nu: np.ndarray  # (N,) eigenvalue magnitudes in (0, 1)
    theta: np.ndarray  # (N,) eigenvalue phases
    b_re: np.ndarray  # (N, D_u)
    b_im: np.ndarray
    c_re: np.ndarray  # (D_u, N)
    c_im: np.ndarray
    d: np.ndarray  # (D_u,)

    def __post_init__(self):
        f = {k: np.asarray(getattr(self, k), dtype=np.float64) for k in self.__dataclass_fields__}
        n = f["nu"].shape[0]
        if f["nu"].shape != (n,) or f["theta"].shape != (n,):
            raise DimensionError("nu and theta must be vectors of equal length")
        d_u = f["d"].shape[0]
        if f["b_re"].shape != (n, d_u) or f["b_im"].shape != (n, d_u):
            raise DimensionError(f"B~ must be ({n}, {d_u})")
        if f["c_re"].shape != (d_u, n) or f["c_im"].shape != (d_u, n):
            raise DimensionError(f"C~ must be ({d_u}, {n})")
        if not all(np.all(np.isfinite(v)) for v in f.values()):
            raise ContractError("non-finite LRU parameter")
        if np.any(f["nu"] < 0) or np.any(f["nu"] >= 1):
            raise ContractError("nu must lie in [0, 1)")
        for k, v in f.items():
            object.__setattr__(self, k, v)

    @property
    def n_modes(self) -> int:
        return self.nu.shape[0]


def lru_states(params: LRUParams, u):
    """Complex states (x_re, x_im), each (batch, T, N), for a (batch, T, D_u)
    or (T, D_u) input."""
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 2
    if single:
        u = u[None]
    if u.ndim != 3 or u.shape[-1] != params.d.shape[0]:
        raise DimensionError(f"expected (batch, T, {params.d.shape[0]}) input, got {u.shape}")
    lam_re = params.nu * np.cos(params.theta)
    lam_im = params.nu * np.sin(params.theta)
    in_re = u @ params.b_re.T
    in_im = u @ params.b_im.T
    B, T, _ = u.shape
    xr = np.zeros((B, T, params.n_modes))
    xi = np.zeros((B, T, params.n_modes))
    pr = np.zeros((B, params.n_modes))
    pi = np.zeros((B, params.n_modes))
    for t in range(T):
        pr, pi = lam_re * pr - lam_im * pi + in_re[:, t], lam_im * pr + lam_re * pi + in_im[:, t]
        xr[:, t], xi[:, t] = pr, pi
    if single:
        return xr[0], xi[0]
    return xr, xi


def lru_forward(params: LRUParams, u, return_imag: bool = False):
    """y_t = Re(C~ x~_t) + d * u_t.

    With ``return_imag`` the discarded imaginary part Im(C~ x~_t) is returned
    as well.
    """
    u = np.asarray(u, dtype=np.float64)
    xr, xi = lru_states(params, u)
    y = xr @ params.c_re.T - xi @ params.c_im.T + params.d * u
    if return_imag:
        return y, xr @ params.c_im.T + xi @ params.c_re.T
    return y


def lru_gamma_normalize(params: LRUParams) -> LRUParams:
    """Scale row k of B~ by sqrt(1 - nu_k^2)."""
    if np.any(params.nu >= 1):
        raise ContractError("normalisation needs nu < 1")
    s = np.sqrt(1.0 - params.nu**2)[:, None]
    return LRUParams(params.nu, params.theta, params.b_re * s, params.b_im * s, params.c_re, params.c_im, params.d)


def block_diag_p(layer: RotRNNLayerParams) -> np.ndarray:
    """The (D_x, D_x) block-diagonal matrix of per-head P factors."""
    p = make_p(layer.m)
    H, d_h = layer.n_heads, layer.head_dim
    out = np.zeros((H * d_h, H * d_h))
    for h in range(H):
        out[h * d_h : (h + 1) * d_h, h * d_h : (h + 1) * d_h] = p[h]
    return out


def embed_rotrnn_as_lru(layer: RotRNNLayerParams, c: float = 1.0):
    """Rewrite a layer with D_h = 2 as an LRU with one conjugate pair per head.

    Returns ``(lru_params, basis)`` where ``basis`` is the block-diagonal P.
    """
    if layer.head_dim != 2:
        raise ContractError(f"embedding needs head dimension 2, got {layer.head_dim}")
    H = layer.n_heads
    p = make_p(layer.m)  # (H, 2, 2)
    gamma = np.exp(-np.exp(layer.gamma_log))
    xi = _xi(layer.gamma_log, layer.b, c)
    bt = np.matmul(np.swapaxes(p, 1, 2), xi[:, None, None] * layer.b)  # (H, 2, D_u) = P^T xi B
    ct = np.matmul(layer.c_out.reshape(-1, H, 2).transpose(1, 0, 2), p)  # (H, D_u, 2) = C P
    r2 = 1.0 / np.sqrt(2.0)

    nu = np.repeat(gamma, 2)
    theta = np.stack([layer.thetas[:, 0], -layer.thetas[:, 0]], axis=1).reshape(-1)
    # U^H rows: (1, i)/sqrt2 and (1, -i)/sqrt2
    b_re = np.repeat(bt[:, 0] * r2, 2, axis=0)
    b_im = np.stack([bt[:, 1], -bt[:, 1]], axis=1).reshape(2 * H, -1) * r2
    # U columns: (1, -i)/sqrt2 and (1, i)/sqrt2
    c_re = np.repeat(ct[:, :, 0] * r2, 2, axis=0).T
    c_im = np.stack([-ct[:, :, 1], ct[:, :, 1]], axis=1).reshape(2 * H, -1).T * r2
    params = LRUParams(nu, theta, b_re, b_im, c_re, c_im, layer.d_skip.copy())
    return params, block_diag_p(layer)


def lru_output(params: LRUParams, batch):
    """``lru_forward`` on anything ``layer_forward`` accepts."""
    return lru_forward(params, _as_array(batch))
