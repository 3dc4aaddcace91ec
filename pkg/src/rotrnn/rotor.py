"""Rotation-matrix algebra.

Everything here works on float64 arrays and accepts stacks of matrices
(leading batch axes), since a RotRNN layer carries one matrix per head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError

SKEW_TOL = 1e-12

# Pade(13) coefficients and the 1-norm bound below which no squaring is needed
# (Higham 2005, Table 10.2).
_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_THETA13 = 5.371920351148152


def _check_square(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionError(f"expected square matrix, got shape {m.shape}")
    return m


def skew(m):
    """Return ``m - m.T`` with exact antisymmetry.

    Only the strict upper triangle is computed; the lower triangle is its
    negated mirror and the diagonal is zero.
    """
    m = _check_square(m)
    n = m.shape[-1]
    iu = np.triu_indices(n, 1)
    upper = m[..., iu[0], iu[1]] - m[..., iu[1], iu[0]]
    s = np.zeros_like(m)
    s[..., iu[0], iu[1]] = upper
    s[..., iu[1], iu[0]] = -upper
    return s


def _pade13_expm(a: np.ndarray) -> np.ndarray:
    """Scaling-and-squaring with a degree-13 Pade approximant (no checks)."""
    n = a.shape[-1]
    norm1 = np.abs(a).sum(axis=-2).max(axis=-1)
    # one squaring count for the whole stack keeps the code vectorised
    top = float(np.max(norm1)) if norm1.size else 0.0
    s = max(0, int(np.ceil(np.log2(top / _THETA13)))) if top > _THETA13 else 0
    a = a / (2.0**s)

    b = _PADE13
    ident = np.broadcast_to(np.eye(n), a.shape)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident
    r = np.linalg.solve(v - u, v + u)
    for _ in range(s):
        r = r @ r
    return r


def is_skew(s, tol: float = SKEW_TOL) -> bool:
    s = np.asarray(s)
    return bool(np.max(np.abs(s + np.swapaxes(s, -1, -2)), initial=0.0) <= tol)


def expm(s):
    """Matrix exponential of a skew-symmetric matrix (or stack of them)."""
    s = _check_square(s)
    if not is_skew(s):
        raise ContractError("expm expects a skew-symmetric matrix")
    return _pade13_expm(s)


def expm_frechet(s, e):
    """Return ``(exp(s), L(s, e))`` with ``L`` the Frechet derivative of exp at
    ``s`` in direction ``e``.

    Uses the block identity exp([[s, e], [0, s]]) = [[exp(s), L], [0, exp(s)]].
    """
    s = _check_square(s)
    e = np.asarray(e, dtype=np.float64)
    if e.shape != s.shape:
        raise DimensionError(f"direction shape {e.shape} does not match {s.shape}")
    if not is_skew(s):
        raise ContractError("expm_frechet expects a skew-symmetric base point")
    n = s.shape[-1]
    big = np.zeros(s.shape[:-2] + (2 * n, 2 * n))
    big[..., :n, :n] = s
    big[..., n:, n:] = s
    big[..., :n, n:] = e
    out = _pade13_expm(big)
    return out[..., :n, :n], out[..., :n, n:]


def make_p(m):
    """Orthogonal factor ``P = exp(m - m.T)``; ``m`` must have even size."""
    m = _check_square(m)
    if m.shape[-1] % 2:
        raise DimensionError(f"head dimension must be even, got {m.shape[-1]}")
    return expm(skew(m))


def theta_apply(thetas, k, x):
    """Apply the block rotation Theta(k * thetas) to ``x`` without forming it.

    ``x[..., 2i:2i+2]`` is rotated by angle ``k * thetas[..., i]``. Leading axes
    broadcast, so one call can rotate a whole (time, batch, head) stack.
    """
    x = np.asarray(x, dtype=np.float64)
    thetas = np.asarray(thetas, dtype=np.float64)
    if x.shape[-1] % 2:
        raise DimensionError(f"state length must be even, got {x.shape[-1]}")
    if thetas.shape[-1] != x.shape[-1] // 2:
        raise DimensionError(f"{thetas.shape[-1]} angles for state of length {x.shape[-1]}")
    # a (even, odd) pair is laid out exactly like a complex128, and a 2x2
    # rotation by phi is multiplication by exp(i phi)
    z = np.ascontiguousarray(x).view(np.complex128)
    return (z * np.exp(1j * np.multiply(k, thetas))).view(np.float64)


@dataclass(frozen=True)
class RotationFactor:
    """A = P Theta P^T stored as its factors; the dense A is never built."""

    p: np.ndarray
    thetas: np.ndarray

    def __post_init__(self):
        p = _check_square(self.p)
        n = p.shape[-1]
        if n % 2:
            raise DimensionError(f"rotation dimension must be even, got {n}")
        thetas = np.asarray(self.thetas, dtype=np.float64)
        if thetas.shape[-1] != n // 2:
            raise DimensionError(f"expected {n // 2} angles, got {thetas.shape[-1]}")
        defect = np.linalg.norm(np.swapaxes(p, -1, -2) @ p - np.eye(n), axis=(-2, -1))
        if np.any(defect > 1e-8):
            raise ContractError(f"P is not orthogonal (defect {np.max(defect):.2e})")
        if np.any(np.abs(np.linalg.det(p) - 1.0) > 1e-6):
            raise ContractError("P must have determinant +1")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "thetas", thetas)

    @classmethod
    def from_weights(cls, m, thetas) -> "RotationFactor":
        return cls(make_p(m), thetas)

    @property
    def n(self) -> int:
        return self.p.shape[-1]


def rotate(rf: RotationFactor, x, k=1):
    """Compute ``A^k x`` with ``A = P Theta P^T``; ``x`` may carry leading axes."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != rf.n:
        raise DimensionError(f"state length {x.shape[-1]} != rotation size {rf.n}")
    z = x @ rf.p  # rows of P^T x
    z = theta_apply(rf.thetas, k, z)
    return z @ rf.p.T
