"""Prefix scans over the rotation-decay monoid.

An element ``(gamma, theta, state)`` stands for the affine map
``x -> gamma * Theta(theta) x + state``; composing two of them is again such
a map, which is what makes the recurrence scannable. Sequences are stored as
struct-of-arrays with time on axis 0:

    gamma  (T, *lead)          decay accumulator
    theta  (T, *lead, n/2)     angle accumulator
    state  (T, *lead, n)       state vector

``lead`` axes only need to broadcast against each other, so a layer can scan
(time, batch, head, D_h) states with per-head (time, 1, head) decays.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np

from .errors import DimensionError
from .rotor import theta_apply


class ScanElement(NamedTuple):
    gamma: np.ndarray
    theta: np.ndarray
    state: np.ndarray

    def step(self, t) -> "ScanElement":
        return ScanElement(self.gamma[t], self.theta[t], self.state[t])


def identity_like(e: ScanElement) -> ScanElement:
    return ScanElement(np.ones_like(e.gamma), np.zeros_like(e.theta), np.zeros_like(e.state))


def _check(e: ScanElement):
    n = np.shape(e.state)[-1]
    if np.shape(e.theta)[-1] * 2 != n:
        raise DimensionError(f"theta length {np.shape(e.theta)[-1]} does not match state length {n}")


def combine(a: ScanElement, b: ScanElement) -> ScanElement:
    """Compose ``a`` (earlier) with ``b`` (later)."""
    _check(a)
    _check(b)
    if np.shape(a.state)[-1] != np.shape(b.state)[-1]:
        raise DimensionError("state lengths differ")
    rotated = theta_apply(b.theta, 1, a.state)
    state = np.asarray(b.gamma)[..., None] * rotated + b.state
    return ScanElement(a.gamma * b.gamma, a.theta + b.theta, state)


def _broadcast(elems: ScanElement) -> ScanElement:
    """Give gamma and theta a common shape, and the state its full shape.

    The decay and angle fields are not expanded over axes where only the
    state varies (e.g. batch), which keeps their trig work small.
    """
    g = np.asarray(elems.gamma, dtype=np.float64)
    th = np.asarray(elems.theta, dtype=np.float64)
    st = np.asarray(elems.state, dtype=np.float64)
    plead = np.broadcast_shapes(g.shape, th.shape[:-1])
    lead = np.broadcast_shapes(plead, st.shape[:-1])
    if len(plead) < len(lead):
        plead = (1,) * (len(lead) - len(plead)) + plead
    plead = (lead[0],) + plead[1:]
    return ScanElement(
        np.broadcast_to(g, plead),
        np.broadcast_to(th, plead + th.shape[-1:]),
        np.broadcast_to(st, lead + st.shape[-1:]),
    )


def sequential_scan(elems: ScanElement) -> ScanElement:
    """Inclusive scan, one ``combine`` per time step."""
    _check(elems)
    if np.shape(elems.state)[0] == 0:
        raise ValueError("cannot scan an empty sequence")
    e = _broadcast(elems)
    gam = np.empty(e.gamma.shape)
    th = np.empty(e.theta.shape)
    st = np.empty(e.state.shape)
    acc = e.step(0)
    gam[0], th[0], st[0] = acc
    for t in range(1, e.state.shape[0]):
        acc = combine(acc, e.step(t))
        gam[t], th[t], st[t] = acc
    return ScanElement(gam, th, st)


def _pad_time(x: np.ndarray, total: int, fill: float) -> np.ndarray:
    extra = total - x.shape[0]
    if extra == 0:
        return x
    pad = np.full((extra,) + x.shape[1:], fill)
    return np.concatenate([x, pad], axis=0)


def _split(n: int, parts: int):
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def parallel_scan(elems: ScanElement, chunk: int, workers: int = 1) -> ScanElement:
    """Chunked two-pass inclusive scan.

    1. every chunk is scanned locally; all chunks advance together, so the
       python loop runs ``chunk`` times rather than ``T`` times;
    2. the chunk totals are scanned to get each chunk's carry-in;
    3. each carry is combined into every element of its chunk.

    ``workers > 1`` splits the chunks of passes 1 and 3 across threads.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    _check(elems)
    T = np.shape(elems.state)[0]
    if T == 0:
        raise ValueError("cannot scan an empty sequence")
    if chunk >= T:
        return sequential_scan(elems)

    e = _broadcast(elems)
    nc = -(-T // chunk)
    total = nc * chunk

    def to_chunks(x, fill):
        x = _pad_time(x, total, fill)
        x = x.reshape((nc, chunk) + x.shape[1:])
        return np.swapaxes(x, 0, 1)  # (chunk, nc, ...)

    blocks = ScanElement(to_chunks(e.gamma, 1.0), to_chunks(e.theta, 0.0), to_chunks(e.state, 0.0))

    parts = _split(nc, max(1, min(workers, nc)))

    def local(sl):
        return sequential_scan(ScanElement(blocks.gamma[:, sl], blocks.theta[:, sl], blocks.state[:, sl]))

    if len(parts) > 1:
        with ThreadPoolExecutor(len(parts)) as pool:
            pieces = list(pool.map(local, parts))
        scanned = ScanElement(*(np.concatenate(f, axis=1) for f in zip(*pieces)))
    else:
        scanned = local(slice(None))

    totals = scanned.step(-1)  # (nc, ...)
    carry = sequential_scan(totals)
    # exclusive carry: chunk c receives the total of chunks < c
    ident = identity_like(totals.step(slice(0, 1)))
    carry = ScanElement(*(np.concatenate([i, c[:-1]], axis=0) for i, c in zip(ident, carry)))

    def broadcast(sl):
        c = ScanElement(carry.gamma[None, sl], carry.theta[None, sl], carry.state[None, sl])
        s = ScanElement(scanned.gamma[:, sl], scanned.theta[:, sl], scanned.state[:, sl])
        return combine(c, s)

    if len(parts) > 1:
        with ThreadPoolExecutor(len(parts)) as pool:
            pieces = list(pool.map(broadcast, parts))
        out = ScanElement(*(np.concatenate(f, axis=1) for f in zip(*pieces)))
    else:
        out = broadcast(slice(None))

    def from_chunks(x):
        x = np.swapaxes(x, 0, 1)
        return x.reshape((total,) + x.shape[2:])[:T]

    return ScanElement(*(from_chunks(f) for f in out))


def default_chunk(T: int) -> int:
    """Chunk length minimising the python-level step count (about sqrt(T))."""
    return max(1, int(round(np.sqrt(T))))


def scan(elems: ScanElement, chunk: int | None = None, workers: int = 1) -> ScanElement:
    T = np.shape(elems.state)[0]
    return parallel_scan(elems, chunk or default_chunk(T), workers)
