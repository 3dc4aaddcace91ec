from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import central_difference

from rotrnn.errors import ConfigError, DimensionError, InputError
from rotrnn.layer import SequenceBatch
from rotrnn.model import (
    BatchNormState,
    ModelConfig,
    batchnorm_forward,
    cross_entropy_loss,
    encode,
    gelu,
    gelu_grad,
    hidden_norms,
    init_model,
    model_forward,
)

GOLDEN = Path(__file__).parent / "golden"


def small(readout="pool", **kw):
    cfg = ModelConfig(d_in=6, n_classes=3, d_model=8, d_state=8, n_heads=2, n_layers=2, readout=readout,
                      n_outputs=2, **kw)
    return init_model(cfg, 0)


def tokens(seed=0, B=3, T=12, lengths=None):
    return SequenceBatch(np.random.default_rng(seed).integers(0, 6, (B, T)), lengths=lengths)


def test_gelu_values():
    assert gelu(0.0) == 0.0
    assert np.isclose(gelu(1.0), 0.8411919906082768)
    assert np.isclose(gelu(-3.0), -0.0036373920817729943)


def test_gelu_grad_matches_fd():
    x = np.linspace(-4, 4, 41)
    fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6
    assert np.allclose(gelu_grad(x), fd, atol=1e-8)


def test_config_rejects():
    with pytest.raises(ConfigError):
        ModelConfig(d_in=3, n_classes=2, readout="max")
    with pytest.raises(ConfigError):
        ModelConfig(d_in=3, n_classes=1)
    with pytest.raises(ConfigError):
        ModelConfig(d_in=3, n_classes=2, dropout=1.0)


def test_param_leaves():
    m = small()
    names = set(m.params)
    assert {"encoder.w", "encoder.b", "classifier.w", "classifier.b"} <= names
    for i in range(2):
        for k in ("norm.scale", "norm.shift", "rnn.m", "rnn.thetas", "rnn.gamma_log", "rnn.b", "rnn.c_out",
                  "rnn.d_skip", "mlp.w_a", "mlp.b_a", "mlp.w_g", "mlp.b_g"):
            assert f"blocks.{i}.{k}" in names
    assert set(m.state) == {f"blocks.{i}.norm.{s}" for i in range(2) for s in ("mean", "var")}


def test_output_shapes():
    assert model_forward(small(), tokens()).shape == (3, 3)
    assert model_forward(small("last"), tokens()).shape == (3, 2, 3)


def test_encode_rejects_out_of_vocab():
    with pytest.raises(InputError):
        encode(small(), SequenceBatch(np.array([[0, 6]])))
    with pytest.raises(InputError):
        encode(small(), SequenceBatch(np.zeros((1, 2, 6))))


def test_feature_input():
    cfg = ModelConfig(d_in=4, n_classes=2, d_model=8, d_state=8, n_heads=2, n_layers=1, tokens=False)
    m = init_model(cfg, 0)
    x = SequenceBatch(np.random.default_rng(0).normal(size=(2, 5, 4)))
    assert model_forward(m, x).shape == (2, 2)


def test_batchnorm_train_statistics_ignore_padding():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 6, 3)) * 3 + 1
    mask = np.ones((2, 6))
    mask[1, 4:] = 0
    bn = BatchNormState(np.zeros(3), np.ones(3), np.ones(3), np.zeros(3))
    out, _, mean, var = batchnorm_forward(x, mask, bn, True)
    valid = out[mask.astype(bool)]
    assert np.allclose(valid.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(valid.var(axis=0), 1, atol=1e-4)
    y = x.copy()
    y[1, 4:] = 1e6
    out2, *_ = batchnorm_forward(y, mask, bn, True)
    assert np.allclose(out[mask.astype(bool)], out2[mask.astype(bool)])
    assert np.allclose(mean, 0.1 * x[mask.astype(bool)].mean(axis=0))


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNormState(np.full(2, 1.0), np.full(2, 4.0), np.ones(2), np.zeros(2), eps=0.0)
    out, _, mean, var = batchnorm_forward(np.full((1, 1, 2), 3.0), np.ones((1, 1)), bn, False)
    assert np.allclose(out, 1.0) and np.array_equal(mean, bn.mean) and np.array_equal(var, bn.var)


def test_train_mode_updates_running_stats_eval_does_not():
    m = small()
    before = {k: v.copy() for k, v in m.state.items()}
    model_forward(m, tokens(), train_mode=False)
    assert all(np.array_equal(before[k], m.state[k]) for k in before)
    model_forward(m, tokens(), train_mode=True)
    assert not np.array_equal(before["blocks.0.norm.mean"], m.state["blocks.0.norm.mean"])


def test_pool_ignores_padding_content():
    m = small()
    lengths = np.array([12, 7, 3])
    a = tokens(0, lengths=lengths)
    data = a.data.copy()
    data[1, 7:] = 0
    data[2, 3:] = 5
    b = SequenceBatch(data, lengths=lengths)
    assert np.allclose(model_forward(m, a), model_forward(m, b), atol=1e-12)


def test_last_readout_uses_lengths():
    m = small("last")
    full = tokens(1, B=1, T=10)
    short = SequenceBatch(np.concatenate([full.data, np.zeros((1, 4), dtype=int)], axis=1), lengths=np.array([10]))
    assert np.allclose(model_forward(m, full), model_forward(m, short), atol=1e-12)


def test_last_readout_too_short():
    cfg = ModelConfig(d_in=6, n_classes=3, d_model=4, d_state=4, n_heads=1, n_layers=1, readout="last",
                      n_outputs=5)
    with pytest.raises(DimensionError):
        model_forward(init_model(cfg, 0), SequenceBatch(np.zeros((1, 3), dtype=int)))


def test_dropout_needs_rng_in_train_mode():
    m = small(dropout=0.5)
    with pytest.raises(ValueError):
        model_forward(m, tokens(), train_mode=True)
    model_forward(m, tokens(), train_mode=False)


def test_cross_entropy():
    loss, acc = cross_entropy_loss(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
    assert np.isclose(loss, np.log(5)) and 0 <= acc <= 1
    logits = np.eye(3) * 50
    loss, acc = cross_entropy_loss(logits, np.arange(3))
    assert loss < 1e-20 and acc == 1.0
    with pytest.raises(DimensionError):
        cross_entropy_loss(np.zeros((2, 3)), np.zeros(3, dtype=int))
    with pytest.raises(InputError):
        cross_entropy_loss(np.zeros((1, 3)), np.array([3]))


def test_cross_entropy_weights_mask_entries():
    logits = np.array([[5.0, 0.0], [0.0, 5.0]])
    loss, acc = cross_entropy_loss(logits, np.array([0, 0]), weights=np.array([1.0, 0.0]))
    assert acc == 1.0 and loss < 0.01


@given(st.integers(0, 1000))
def test_cross_entropy_gradient_is_softmax_minus_onehot(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(3, 4))
    labels = rng.integers(0, 4, 3)
    g = central_difference(lambda: cross_entropy_loss(logits, labels)[0], logits)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert np.allclose(g, (p - np.eye(4)[labels]) / 3, atol=1e-8)


def test_hidden_norms_shape_and_positive():
    out = hidden_norms(small(), tokens(), t_buckets=3)
    assert out.shape == (2, 3) and np.all(out > 0)


def test_init_is_deterministic():
    a, b = small(), small()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_golden_logits():
    m = small("last")
    logits = model_forward(m, tokens(5))
    ref = np.load(GOLDEN / "model_logits.npy")
    assert np.allclose(logits, ref, atol=1e-10)


def test_residual_identity_when_mlp_output_zero():
    from rotrnn.model import block_forward

    m = small()
    m.params["blocks.0.mlp.w_a"] = np.zeros_like(m.params["blocks.0.mlp.w_a"])
    m.params["blocks.0.mlp.b_a"] = np.zeros_like(m.params["blocks.0.mlp.b_a"])
    x = np.random.default_rng(0).normal(size=(2, 5, 8))
    out, _, _ = block_forward(m, 0, x, np.ones((2, 5)), train_mode=True)
    assert np.array_equal(out, x)


def test_identical_sequences_identical_outputs():
    m = small()
    row = np.random.default_rng(1).integers(0, 6, 9)
    out = model_forward(m, SequenceBatch(np.tile(row, (4, 1))), train_mode=True)
    assert np.allclose(out, out[0], atol=1e-13)


def test_eval_forward_is_pure():
    m = small("last")
    b = tokens(2)
    assert np.array_equal(model_forward(m, b), model_forward(m, b))


def test_zero_blocks_is_pooled_encoder():
    cfg = ModelConfig(d_in=6, n_classes=3, d_model=4, d_state=4, n_heads=1, n_layers=0)
    m = init_model(cfg, 0)
    b = tokens(3)
    emb = m.params["encoder.w"][b.data] + m.params["encoder.b"]
    expect = emb.mean(axis=1) @ m.params["classifier.w"] + m.params["classifier.b"]
    assert np.allclose(model_forward(m, b), expect, atol=1e-13)


def test_single_timestep_pool_is_identity():
    m = small()
    b = tokens(4, T=1)
    from rotrnn.model import forward_with_cache

    _, cache, _ = forward_with_cache(m, b)
    assert np.array_equal(cache["feats"], cache["h_final"][:, 0])


def test_cross_entropy_extended_precision():
    import mpmath

    mpmath.mp.dps = 40
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(6, 10)) * 5
    labels = rng.integers(0, 10, 6)
    ref = sum(mpmath.log(sum(mpmath.e ** mpmath.mpf(x) for x in row)) - mpmath.mpf(row[l])
              for row, l in zip(logits, labels)) / 6
    assert abs(cross_entropy_loss(logits, labels)[0] - float(ref)) < 1e-12
