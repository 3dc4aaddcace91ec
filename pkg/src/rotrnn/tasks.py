"""Synthetic desk-scale tasks.

Every sample is a pure function of ``(spec, index)``: samples are produced in
blocks of ``BLOCK`` consecutive indices from a generator seeded by
``(seed, kind, block)``. Splits are index ranges of that stream
(train, then val, then test), so they are disjoint by construction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .layer import SequenceBatch

BLOCK = 1024
KINDS = ("white_noise", "copy", "majority")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    T: int = 256
    vocab: int = 8  # copy: symbol alphabet; majority: number of classes
    pattern_len: int = 10  # copy
    n_signal: int = 5  # majority
    noise_vocab: int = 4  # majority
    dim: int = 32  # white_noise feature width
    seed: int = 0
    n_train: int = 1_000_000
    n_val: int = 1024
    n_test: int = 1024

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be non-negative")
        if self.kind == "copy":
            if self.vocab < 2 or self.pattern_len < 1:
                raise ConfigError("copy task needs vocab >= 2 and pattern_len >= 1")
            if self.T < 2 * self.pattern_len + 1:
                raise ConfigError(
                    f"copy task with K={self.pattern_len} needs T >= {2 * self.pattern_len + 1}, got {self.T}"
                )
        if self.kind == "majority":
            if self.vocab < 2 or self.noise_vocab < 1:
                raise ConfigError("majority task needs >= 2 classes and >= 1 noise token")
            if self.n_signal < 1 or self.n_signal > self.T:
                raise ConfigError("n_signal must lie in [1, T]")
            if self.n_signal % 2 == 0 or (self.vocab > 2 and self.n_signal > 1):
                raise ConfigError(
                    f"majority over {self.vocab} classes with {self.n_signal} signal tokens can tie"
                )
        if self.kind == "white_noise" and self.dim < 1:
            raise ConfigError("white noise needs dim >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    # token layout
    @property
    def n_tokens(self) -> int:
        if self.kind == "copy":
            return self.vocab + 2  # symbols, blank, marker
        if self.kind == "majority":
            return self.vocab + self.noise_vocab
        return 0

    @property
    def n_classes(self) -> int:
        return self.vocab

    @property
    def blank(self) -> int:
        return self.vocab

    @property
    def marker(self) -> int:
        return self.vocab + 1

    def split_range(self, split: str) -> tuple[int, int]:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        lo = {"train": 0, "val": self.n_train, "test": self.n_train + self.n_val}[split]
        size = {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]
        return lo, lo + size


def _rng(spec: TaskSpec, block: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, KINDS.index(spec.kind), block])


@lru_cache(maxsize=64)
def _copy_block(spec: TaskSpec, block: int):
    rng = _rng(spec, block)
    K, T = spec.pattern_len, spec.T
    pattern = rng.integers(0, spec.vocab, (BLOCK, K))
    seq = np.full((BLOCK, T), spec.blank, dtype=np.int64)
    seq[:, :K] = pattern
    seq[:, T - K - 1] = spec.marker
    return seq, pattern


@lru_cache(maxsize=64)
def _majority_block(spec: TaskSpec, block: int):
    rng = _rng(spec, block)
    T, n = spec.T, spec.n_signal
    seq = rng.integers(spec.vocab, spec.vocab + spec.noise_vocab, (BLOCK, T))
    pos = np.argsort(rng.uniform(size=(BLOCK, T)), axis=1)[:, :n]
    sig = rng.integers(0, spec.vocab, (BLOCK, n))
    np.put_along_axis(seq, pos, sig, axis=1)
    counts = np.stack([(sig == c).sum(axis=1) for c in range(spec.vocab)], axis=1)
    return seq, counts.argmax(axis=1)


def _white_block(spec: TaskSpec, block: int):
    return _rng(spec, block).standard_normal((BLOCK, spec.T, spec.dim))


def _gather(spec: TaskSpec, make, split: str, start: int, count: int | None):
    lo, hi = spec.split_range(split)
    if count is None:
        count = hi - lo - start
    first = lo + start
    if start < 0 or count < 0 or first + count > hi:
        raise ConfigError(f"requested samples [{start}, {start + count}) outside the {split} split")
    parts = []
    i = first
    while i < first + count:
        blk, off = divmod(i, BLOCK)
        take = min(BLOCK - off, first + count - i)
        out = make(spec, blk)
        parts.append(tuple(a[off : off + take] for a in (out if isinstance(out, tuple) else (out,))))
        i += take
    if not parts:
        return None
    return tuple(np.concatenate(cols, axis=0) for cols in zip(*parts))


def gen_white_noise(spec: TaskSpec, split: str = "train", start: int = 0, count: int | None = None) -> SequenceBatch:
    """I.i.d. standard-normal (count, T, dim) inputs."""
    if spec.kind != "white_noise":
        raise ConfigError("spec is not a white-noise task")
    (data,) = _gather(spec, _white_block, split, start, count)
    return SequenceBatch(data)


def gen_copy_task(spec: TaskSpec, split: str = "train", start: int = 0, count: int | None = None):
    """Copy task: ``K`` symbols, blanks, a marker at ``T-K-1``, then ``K``
    blank read-out slots. Labels are the ``K`` pattern symbols, to be emitted
    in order at the last ``K`` positions."""
    if spec.kind != "copy":
        raise ConfigError("spec is not a copy task")
    seq, labels = _gather(spec, _copy_block, split, start, count)
    return SequenceBatch(seq), labels


def gen_majority(spec: TaskSpec, split: str = "train", start: int = 0, count: int | None = None):
    """Noise tokens with ``n_signal`` class tokens at random positions; the
    label is the most frequent class among them."""
    if spec.kind != "majority":
        raise ConfigError("spec is not a majority task")
    seq, labels = _gather(spec, _majority_block, split, start, count)
    return SequenceBatch(seq), labels


def generate(spec: TaskSpec, split: str = "train", start: int = 0, count: int | None = None):
    """Dispatch on ``spec.kind``; white noise returns ``(batch, None)``."""
    if spec.kind == "white_noise":
        return gen_white_noise(spec, split, start, count), None
    if spec.kind == "copy":
        return gen_copy_task(spec, split, start, count)
    return gen_majority(spec, split, start, count)

