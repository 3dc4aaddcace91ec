"""The RotRNN recurrent layer.

Per head h the hidden state follows

    x_t = gamma_h A_h x_{t-1} + xi_h B_h u_t,   A_h = P_h Theta_h P_h^T,  x_0 = 0

with ``xi_h`` rescaling ``B_h`` so that trace((xi B)^T (xi B)) = 1 - c gamma^2.
The scan runs in the P^T-rotated basis where A reduces to the block rotation
Theta. Heads are concatenated head-major and mixed by ``C``; ``d`` is an
elementwise skip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .rotor import make_p, theta_apply
from .scan import ScanElement, scan


def gamma_of(gamma_log):
    """Decay ``exp(-exp(gamma_log))``, always inside (0, 1)."""
    return np.exp(-np.exp(gamma_log))


@dataclass
class HeadParams:
    m: np.ndarray  # (D_h, D_h) weights behind P
    thetas: np.ndarray  # (D_h/2,)
    gamma_log: float
    b: np.ndarray  # (D_h, D_u)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        self.thetas = np.asarray(self.thetas, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        d_h = self.m.shape[0]
        if self.m.shape != (d_h, d_h) or d_h < 2 or d_h % 2:
            raise DimensionError(f"head weight must be square with even size >= 2, got {self.m.shape}")
        if self.thetas.shape != (d_h // 2,):
            raise DimensionError(f"expected {d_h // 2} angles, got shape {self.thetas.shape}")
        if self.b.ndim != 2 or self.b.shape[0] != d_h:
            raise DimensionError(f"input matrix must be ({d_h}, D_u), got {self.b.shape}")

    @property
    def dim(self) -> int:
        return self.m.shape[0]


@dataclass
class RotRNNLayerParams:
    """Head parameters stacked along a leading head axis."""

    m: np.ndarray  # (H, D_h, D_h)
    thetas: np.ndarray  # (H, D_h/2)
    gamma_log: np.ndarray  # (H,)
    b: np.ndarray  # (H, D_h, D_u)
    c_out: np.ndarray  # (D_u, H * D_h)
    d_skip: np.ndarray  # (D_u,)

    def __post_init__(self):
        for name in ("m", "thetas", "gamma_log", "b", "c_out", "d_skip"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        H, d_h, _ = self.m.shape
        d_u = self.b.shape[-1]
        if H < 1 or d_h < 2 or d_h % 2:
            raise DimensionError(f"need H >= 1 heads of even size >= 2, got m {self.m.shape}")
        expect = {
            "m": (H, d_h, d_h),
            "thetas": (H, d_h // 2),
            "gamma_log": (H,),
            "b": (H, d_h, d_u),
            "c_out": (d_u, H * d_h),
            "d_skip": (d_u,),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n_heads(self) -> int:
        return self.m.shape[0]

    @property
    def head_dim(self) -> int:
        return self.m.shape[1]

    @property
    def d_u(self) -> int:
        return self.b.shape[-1]

    @property
    def d_x(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def heads(self) -> list[HeadParams]:
        return [HeadParams(self.m[h], self.thetas[h], float(self.gamma_log[h]), self.b[h]) for h in range(self.n_heads)]

    @classmethod
    def from_heads(cls, heads, c_out, d_skip) -> "RotRNNLayerParams":
        return cls(
            np.stack([h.m for h in heads]),
            np.stack([h.thetas for h in heads]),
            np.array([h.gamma_log for h in heads], dtype=np.float64),
            np.stack([h.b for h in heads]),
            c_out,
            d_skip,
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("m", "thetas", "gamma_log", "b", "c_out", "d_skip")}


@dataclass
class SequenceBatch:
    """A batch of sequences.

    ``data`` is (batch, T, D_u) real features, or (batch, T) integer tokens.
    Positions at or beyond ``lengths[i]`` are padding.
    """

    data: np.ndarray
    lengths: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (2, 3) or self.data.shape[1] < 1:
            raise DimensionError(f"expected (batch, T[, D_u]) with T >= 1, got {self.data.shape}")
        if self.is_tokens:
            pass
        elif not np.all(np.isfinite(self.data)):
            raise ContractError("sequence batch contains non-finite entries")
        if self.lengths is not None:
            self.lengths = np.asarray(self.lengths, dtype=np.int64)
            if self.lengths.shape != (self.batch,):
                raise DimensionError("need one length per sequence")
            if np.any(self.lengths < 1) or np.any(self.lengths > self.T):
                raise ContractError("lengths must lie in [1, T]")

    @property
    def is_tokens(self) -> bool:
        return np.issubdtype(self.data.dtype, np.integer)

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    def mask(self) -> np.ndarray:
        """(batch, T) float mask, 1 on valid positions."""
        if self.lengths is None:
            return np.ones((self.batch, self.T))
        return (np.arange(self.T)[None, :] < self.lengths[:, None]).astype(np.float64)


def _as_array(batch) -> np.ndarray:
    if isinstance(batch, SequenceBatch):
        return np.asarray(batch.data, dtype=np.float64)
    return np.asarray(batch, dtype=np.float64)


def xi_of(head: HeadParams, c: float = 1.0) -> float:
    """Input rescaling giving trace((xi B)^T (xi B)) = 1 - c gamma^2."""
    return float(_xi(np.asarray(head.gamma_log), head.b, c))


def _xi(gamma_log, b, c):
    gamma = gamma_of(gamma_log)
    tr = np.sum(b * b, axis=(-2, -1))
    if np.any(tr <= 0):
        raise ZeroDivisionError("input matrix B is zero; xi is undefined")
    if np.any(c * gamma**2 >= 1):
        raise ContractError("need c * gamma^2 < 1")
    return np.sqrt((1 - c * gamma**2) / tr)


def _head_matmul(x, mats):
    """``out[..., h, :] = x[..., h, :] @ mats[h]`` for x shaped (..., H, D)."""
    lead = x.shape[:-2]
    H, D = x.shape[-2:]
    xs = x.reshape(-1, H, D).transpose(1, 0, 2)
    out = np.matmul(xs, mats)
    return out.transpose(1, 0, 2).reshape(lead + (H, mats.shape[-1]))


def rotated_states(params: RotRNNLayerParams, u, c: float = 1.0, chunk: int | None = None):
    """Scan every head in its P^T-rotated basis.

    ``u`` is (batch, T, D_u). Returns ``(s, cache)`` with ``s`` shaped
    (T, batch, H, D_h); the hidden states are ``x = P s`` per head. ``cache``
    keeps what the backward pass needs.
    """
    u = _as_array(u)
    if u.ndim != 3 or u.shape[-1] != params.d_u:
        raise DimensionError(f"input must be (batch, T, {params.d_u}), got {u.shape}")
    B, T, d_u = u.shape
    H, d_h = params.n_heads, params.head_dim

    gamma = gamma_of(params.gamma_log)
    xi = _xi(params.gamma_log, params.b, c)
    p = make_p(params.m)
    b_norm = xi[:, None, None] * params.b
    # v_t = P^T (xi B) u_t for all heads at once: u @ e_in, e_in[j, h, i]
    e_in = np.matmul(np.swapaxes(b_norm, 1, 2), p).transpose(1, 0, 2).reshape(d_u, H * d_h)

    ut = np.ascontiguousarray(np.swapaxes(u, 0, 1)).reshape(T * B, d_u)
    v = (ut @ e_in).reshape(T, B, H, d_h)

    elems = ScanElement(
        np.broadcast_to(gamma, (T, 1, H)),
        np.broadcast_to(params.thetas[None, None], (T, 1, H, d_h // 2)),
        v,
    )
    s = scan(elems, chunk).state
    cache = {"u": u, "ut": ut, "gamma": gamma, "xi": xi, "p": p, "b_norm": b_norm, "e_in": e_in, "s": s, "c": c}
    return s, cache


def rotrnn_states(params: RotRNNLayerParams, u, c: float = 1.0, chunk: int | None = None):
    """Hidden states (T, batch, H, D_h) of every head, plus the scan cache."""
    s, cache = rotated_states(params, u, c, chunk)
    return _head_matmul(s, np.swapaxes(cache["p"], 1, 2)), cache


def output_matrix(params: RotRNNLayerParams, p) -> np.ndarray:
    """C with each head block multiplied by its P, so y = (C P) s."""
    H, d_h = params.n_heads, params.head_dim
    c_heads = params.c_out.reshape(params.d_u, H, d_h).transpose(1, 0, 2)
    return np.matmul(c_heads, p).transpose(1, 0, 2).reshape(params.d_u, H * d_h)


def layer_apply(params: RotRNNLayerParams, u, c: float = 1.0, chunk: int | None = None):
    """Layer output (batch, T, D_u) and the cache for ``grad.layer_vjp``."""
    s, cache = rotated_states(params, u, c, chunk)
    T, B, H, d_h = s.shape
    f_out = output_matrix(params, cache["p"])
    y = (s.reshape(T * B, H * d_h) @ f_out.T).reshape(T, B, -1)
    y = np.swapaxes(y, 0, 1) + params.d_skip * cache["u"]
    cache["f_out"] = f_out
    return y, cache


def head_forward(head: HeadParams, u, c: float = 1.0, chunk: int | None = None):
    """States (T, D_h) of one head driven by ``u`` of shape (T, D_u)."""
    u = _as_array(u)
    if u.ndim != 2 or u.shape[1] != head.b.shape[1]:
        raise DimensionError(f"input must be (T, {head.b.shape[1]}), got {u.shape}")
    d_u = head.b.shape[1]
    layer = RotRNNLayerParams(
        head.m[None], head.thetas[None], np.array([head.gamma_log]), head.b[None], np.zeros((d_u, head.dim)), np.zeros(d_u)
    )
    x, _ = rotrnn_states(layer, u[None], c, chunk)
    return x[:, 0, 0, :]


def conv_forward(head: HeadParams, u, c: float = 1.0):
    """Unrolled form x_t = xi sum_k gamma^(t-k) A^(t-k) B u_k, O(T^2).

    Reference implementation: powers of A come from rotating by (t-k) theta
    directly, no scan involved.
    """
    u = _as_array(u)
    if u.ndim != 2 or u.shape[1] != head.b.shape[1]:
        raise DimensionError(f"input must be (T, {head.b.shape[1]}), got {u.shape}")
    T = u.shape[0]
    gamma = float(gamma_of(head.gamma_log))
    xi = xi_of(head, c)
    p = make_p(head.m)
    z = (xi * (u @ head.b.T)) @ p  # rows are P^T xi B u_k
    out = np.empty((T, head.dim))
    for t in range(T):
        lag = (t - np.arange(t + 1))[:, None].astype(np.float64)
        terms = theta_apply(head.thetas, lag, z[: t + 1]) * gamma ** lag
        out[t] = p @ terms.sum(axis=0)
    return out


def layer_forward(params: RotRNNLayerParams, batch, capture_states: bool = False, c: float = 1.0):
    """y_t = C x_t^(1:H) + d * u_t for a (batch, T, D_u) input.

    With ``capture_states`` also returns the concatenated states
    (batch, T, D_x) and the per-head state norms (batch, T, H).
    """
    u = _as_array(batch)
    if not capture_states:
        return layer_apply(params, u, c)[0]
    x, _ = rotrnn_states(params, u, c)
    T, B, H, d_h = x.shape
    xc = np.swapaxes(x, 0, 1).reshape(B, T, H * d_h)
    y = xc @ params.c_out.T + params.d_skip * u
    norms = np.linalg.norm(np.swapaxes(x, 0, 1), axis=-1)
    return y, xc, norms


def init_layer(seed, d_u: int, d_x: int, n_heads: int, gamma_min: float, gamma_max: float, theta_max: float):
    """Random layer; ``seed`` may be an int or a ``numpy.random.Generator``."""
    if not 0 < gamma_min < gamma_max < 1:
        raise ConfigError(f"need 0 < gamma_min < gamma_max < 1, got [{gamma_min}, {gamma_max}]")
    if not 0 < theta_max <= 2 * np.pi:
        raise ConfigError(f"theta_max must lie in (0, 2pi], got {theta_max}")
    if n_heads < 1 or d_x % n_heads:
        raise ConfigError(f"D_x={d_x} is not divisible by H={n_heads}")
    d_h = d_x // n_heads
    if d_h % 2 or d_h < 2:
        raise ConfigError(f"head dimension D_x/H={d_h} must be even and >= 2")
    if d_u < 1:
        raise ConfigError("D_u must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    thetas = rng.uniform(0, theta_max, (n_heads, d_h // 2))
    gamma_log = gamma_log_from_uniform(rng.uniform(size=n_heads), gamma_min, gamma_max)
    b = rng.normal(size=(n_heads, d_h, d_u)) / np.sqrt(d_u)
    c_out = rng.normal(size=(d_u, d_x)) / np.sqrt(d_x)
    m = rng.normal(size=(n_heads, d_h, d_h))
    d_skip = rng.normal(size=d_u)
    return RotRNNLayerParams(m, thetas, gamma_log, b, c_out, d_skip)


def gamma_log_from_uniform(q, gamma_min: float, gamma_max: float):
    """Map uniform ``q`` in [0, 1] to gamma_log so that gamma^2 is uniform on
    [gamma_min^2, gamma_max^2]."""
    q = np.asarray(q, dtype=np.float64)
    return np.log(-0.5 * np.log(q * (gamma_max**2 - gamma_min**2) + gamma_min**2))
