"""White-noise probes: hidden-state norm law and scan throughput."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..layer import RotRNNLayerParams, rotated_states
from ..lru_ref import LRUParams, lru_gamma_normalize, lru_states
from ..scan import ScanElement, default_chunk, parallel_scan, sequential_scan


def analytic_norm(gamma: float, T: int, c: float = 1.0) -> np.ndarray:
    """E||x_t||^2 for t = 1..T under i.i.d. standard-normal input and x_0 = 0.

    E_t = gamma^2 E_{t-1} + (1 - c gamma^2); for c = 1 this is 1 - gamma^(2t).
    """
    t = np.arange(1, T + 1)
    if c == 1.0:
        return 1.0 - gamma ** (2 * t)
    return (1 - c * gamma**2) * (1 - gamma ** (2 * t)) / (1 - gamma**2)


@dataclass
class ProbeResult:
    gamma: float
    empirical: np.ndarray  # (T,) mean ||x_t||^2, t = 1..T
    analytic: np.ndarray
    lru_empirical: np.ndarray | None = None  # mean ||x~_t||^2 / N for the normalised LRU
    lru_analytic: np.ndarray | None = None

    @property
    def max_rel_dev(self) -> float:
        return float(np.max(np.abs(self.empirical - self.analytic) / self.analytic))


def probe_norms(
    gamma: float,
    T: int = 512,
    batch: int = 8192,
    d_h: int = 32,
    sub_batch: int = 512,
    seed: int = 0,
    c: float = 1.0,
    with_lru: bool = False,
) -> ProbeResult:
    """Monte Carlo estimate of E||x_t||^2 for one random head of size ``d_h``.

    The batch is streamed in ``sub_batch`` pieces so memory stays bounded.
    With ``with_lru`` a row-normalised LRU with ``d_h / 2`` modes and
    magnitudes spread over [gamma / 2, gamma] is driven by the same noise.
    """
    if not 0 < gamma < 1 or c * gamma**2 >= 1:
        raise ConfigError(f"need 0 < gamma < 1 and c * gamma^2 < 1, got gamma={gamma}, c={c}")
    if T < 1 or batch < 1 or sub_batch < 1 or d_h < 2 or d_h % 2:
        raise ConfigError("T, batch, sub_batch must be positive and d_h even")
    rng = np.random.default_rng(seed)
    d_u = d_h
    layer = RotRNNLayerParams(
        rng.normal(size=(1, d_h, d_h)),
        rng.uniform(0, 2 * np.pi, (1, d_h // 2)),
        np.array([np.log(-np.log(gamma))]),
        rng.normal(size=(1, d_h, d_u)),
        np.zeros((d_u, d_h)),
        np.zeros(d_u),
    )
    lru = None
    if with_lru:
        n = d_h // 2
        b = rng.normal(size=(n, d_u)) + 1j * rng.normal(size=(n, d_u))
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        lru = lru_gamma_normalize(
            LRUParams(rng.uniform(gamma / 2, gamma, n), rng.uniform(0, 2 * np.pi, n), b.real, b.imag,
                      np.zeros((d_u, n)), np.zeros((d_u, n)), np.zeros(d_u))
        )
    acc = np.zeros(T)
    lru_acc = np.zeros(T)
    done = 0
    while done < batch:
        k = min(sub_batch, batch - done)
        u = rng.standard_normal((k, T, d_u))
        s, _ = rotated_states(layer, u, c)
        acc += np.einsum("tbhi,tbhi->t", s, s)  # P is orthogonal: ||x|| = ||P^T x||
        if lru is not None:
            xr, xi = lru_states(lru, u)
            lru_acc += (xr**2 + xi**2).sum(axis=(0, 2))
        done += k
    res = ProbeResult(gamma, acc / batch, analytic_norm(gamma, T, c))
    if lru is not None:
        n = lru.n_modes
        t = np.arange(1, T + 1)[:, None]
        res.lru_empirical = lru_acc / (batch * n)
        res.lru_analytic = (1 - lru.nu[None, :] ** (2 * t)).mean(axis=1)
    return res


def _random_elements(rng, T: int, batch: int, d_h: int) -> ScanElement:
    return ScanElement(
        np.broadcast_to(rng.uniform(0.9, 1.0, (1, 1)), (T, 1)),
        np.broadcast_to(rng.uniform(-np.pi, np.pi, (1, 1, d_h // 2)), (T, 1, d_h // 2)),
        rng.normal(size=(T, batch, d_h)),
    )


def bench_scan(T: int = 4096, d_h: int = 32, batch: int = 8, workers: int = 2, repeat: int = 3,
               chunk: int | None = None, seed: int = 0) -> dict:
    """Best-of-``repeat`` wall time of sequential vs parallel scan on the same
    random elements; throughput is in state elements (T * batch * d_h) per
    second."""
    if T < 1 or d_h < 2 or d_h % 2 or batch < 1 or workers < 1 or repeat < 1:
        raise ConfigError("invalid benchmark geometry")
    chunk = chunk or default_chunk(T)
    elems = _random_elements(np.random.default_rng(seed), T, batch, d_h)

    def best(fn):
        times = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    t_seq = best(lambda: sequential_scan(elems))
    t_par = best(lambda: parallel_scan(elems, chunk, workers))
    n = T * batch * d_h
    return {
        "T": T,
        "d_h": d_h,
        "batch": batch,
        "chunk": chunk,
        "workers": workers,
        "sequential_s": t_seq,
        "parallel_s": t_par,
        "sequential_throughput": n / t_seq,
        "parallel_throughput": n / t_par,
        "speedup": t_seq / t_par,
    }
