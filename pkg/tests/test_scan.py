import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rotrnn.errors import DimensionError
from rotrnn.scan import (
    ScanElement,
    combine,
    default_chunk,
    identity_like,
    parallel_scan,
    scan,
    sequential_scan,
)

seeds = st.integers(0, 2**31 - 1)


def rand_elem(rng, lead=(), half=2):
    return ScanElement(
        rng.uniform(0.5, 1.0, lead),
        rng.uniform(-np.pi, np.pi, lead + (half,)),
        rng.normal(size=lead + (2 * half,)),
    )


def rand_seq(rng, T, half=2, batch=()):
    return ScanElement(
        rng.uniform(0.5, 1.0, (T,) + batch),
        rng.uniform(-np.pi, np.pi, (T,) + batch + (half,)),
        rng.normal(size=(T,) + batch + (2 * half,)),
    )


def close(a, b, tol):
    return all(np.allclose(x, y, atol=tol, rtol=0) for x, y in zip(a, b))


def test_identity_is_two_sided():
    e = rand_elem(np.random.default_rng(0))
    i = identity_like(e)
    assert close(combine(i, e), e, 1e-15)
    assert close(combine(e, i), e, 1e-15)


def test_pure_decay_closed_form():
    a = ScanElement(np.float64(0.5), np.zeros(1), np.array([1.0, 2.0]))
    b = ScanElement(np.float64(0.25), np.zeros(1), np.array([3.0, 4.0]))
    out = combine(a, b)
    assert out.gamma == 0.125
    assert np.array_equal(out.theta, [0.0])
    assert np.allclose(out.state, [0.25 * 1 + 3, 0.25 * 2 + 4])


def test_combine_shape_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        combine(rand_elem(rng, half=2), rand_elem(rng, half=3))
    with pytest.raises(DimensionError):
        combine(ScanElement(1.0, np.zeros(2), np.zeros(2)), ScanElement(1.0, np.zeros(1), np.zeros(2)))


@given(seeds, st.integers(1, 4))
def test_combine_associative(seed, half):
    rng = np.random.default_rng(seed)
    a, b, c = (rand_elem(rng, half=half) for _ in range(3))
    assert close(combine(combine(a, b), c), combine(a, combine(b, c)), 1e-10)


def test_sequential_geometric_chain():
    T = 3
    e = ScanElement(np.full(T, 0.5), np.zeros((T, 1)), np.ones((T, 2)))
    out = sequential_scan(e)
    assert np.allclose(out.state[:, 0], [1.0, 1.5, 1.75])
    assert np.allclose(out.gamma, [0.5, 0.25, 0.125])


def test_single_element_is_itself():
    e = rand_seq(np.random.default_rng(1), 1)
    assert close(sequential_scan(e), e, 0)
    assert close(parallel_scan(e, 4), e, 0)


def test_all_identity():
    e = ScanElement(np.ones(5), np.zeros((5, 2)), np.zeros((5, 4)))
    out = parallel_scan(e, 2)
    assert np.array_equal(out.gamma, np.ones(5)) and not out.state.any() and not out.theta.any()


def test_empty_raises():
    e = ScanElement(np.ones(0), np.zeros((0, 1)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        sequential_scan(e)
    with pytest.raises(ValueError):
        parallel_scan(e, 2)


def test_chunk_must_be_positive():
    with pytest.raises(ValueError):
        parallel_scan(rand_seq(np.random.default_rng(0), 4), 0)


def test_chunk_at_least_T_is_bitwise_sequential():
    e = rand_seq(np.random.default_rng(2), 17, batch=(3,))
    seq = sequential_scan(e)
    for chunk in (17, 18, 100):
        par = parallel_scan(e, chunk)
        assert all(np.array_equal(x, y) for x, y in zip(par, seq))


@given(seeds, st.integers(1, 2048), st.data())
def test_parallel_equals_sequential(seed, T, data):
    chunk = data.draw(st.integers(1, T))
    e = rand_seq(np.random.default_rng(seed), T, half=2, batch=(2,))
    assert close(parallel_scan(e, chunk), sequential_scan(e), 1e-9)


def test_parallel_t1024_chunk64():
    e = rand_seq(np.random.default_rng(3), 1024, half=16)
    seq = sequential_scan(e)
    par = parallel_scan(e, 64)
    assert np.max(np.abs(par.state - seq.state)) < 1e-9


def test_workers_do_not_change_result():
    e = rand_seq(np.random.default_rng(4), 500, batch=(3,))
    a = parallel_scan(e, 23, workers=1)
    b = parallel_scan(e, 23, workers=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@given(seeds, st.integers(1, 64))
def test_gamma_accumulator_is_product(seed, T):
    e = rand_seq(np.random.default_rng(seed), T)
    out = scan(e)
    assert np.allclose(out.gamma, np.cumprod(e.gamma), rtol=1e-12, atol=0)
    assert np.allclose(out.theta, np.cumsum(e.theta, axis=0), atol=1e-12)


def test_broadcast_decay_over_batch():
    rng = np.random.default_rng(5)
    T, B, H, D = 40, 3, 2, 4
    gam = rng.uniform(0.5, 1, (T, 1, H))
    th = rng.uniform(0, 1, (T, 1, H, D // 2))
    st_ = rng.normal(size=(T, B, H, D))
    out = scan(ScanElement(gam, th, st_), chunk=7)
    for b in range(B):
        ref = sequential_scan(ScanElement(gam[:, 0], th[:, 0], st_[:, b]))
        assert np.allclose(out.state[:, b], ref.state, atol=1e-12)


def test_default_chunk():
    assert default_chunk(1) == 1 and default_chunk(4096) == 64
