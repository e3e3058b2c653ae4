"""Weighted loss, the optimizer, and gradient validation."""

import numpy as np
import pytest

from tokenweight import (
    AdamW,
    LogProbTrace,
    TinyLmConfig,
    TokenSequence,
    TrainConfig,
    TrainingDivergedError,
    grad_check,
    init_model,
    weighted_nll,
)
from tokenweight.training import loss_and_grads, train_step
from tokenweight.weighting import uniform_weights

CFG = TinyLmConfig(
    layers=1, d_model=32, n_heads=2, d_ff=64, vocab_size=64, max_context=64
)


def rand_batch(b, t, seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 64, size=(b, t))
    return ids


# ------------------------------------------------------------ weighted nll


def test_weighted_nll_hand_values():
    trace = LogProbTrace(0, 2, np.log([0.5, 0.25]))
    assert weighted_nll(trace, np.array([1.0, 1.0])) == pytest.approx(2.0794, abs=1e-4)
    assert weighted_nll(trace, np.array([2.0, 0.0])) == pytest.approx(1.3863, abs=1e-4)


def test_weighted_nll_zero_weights():
    trace = LogProbTrace(0, 4, -np.ones(4))
    assert weighted_nll(trace, np.zeros(4)) == 0.0


def test_weighted_nll_validation():
    trace = LogProbTrace(0, 2, np.log([0.5, 0.25]))
    with pytest.raises(ValueError):
        weighted_nll(trace, np.ones(3))
    with pytest.raises(ValueError):
        weighted_nll(trace, np.array([1.0, -1.0]))


def test_weighted_nll_linear_in_weights():
    rng = np.random.default_rng(1)
    trace = LogProbTrace(0, 10, -rng.uniform(0.1, 3.0, size=10))
    w = rng.uniform(0, 2, size=10)
    v = rng.uniform(0, 2, size=10)
    a, b = 0.3, 1.7
    lhs = weighted_nll(trace, a * w + b * v)
    rhs = a * weighted_nll(trace, w) + b * weighted_nll(trace, v)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_weighted_nll_accepts_weight_vector():
    trace = LogProbTrace(0, 3, -np.ones(3))
    assert weighted_nll(trace, uniform_weights(3)) == pytest.approx(3.0)


# -------------------------------------------------------------- train step


def test_train_step_deterministic():
    ids = rand_batch(4, 24, 2)
    w = np.ones((4, 24))
    results = []
    for _ in range(2):
        model = init_model(CFG, seed=9)
        tc = TrainConfig(total_steps=10, batch_size=4, warmup_steps=2, seed=0)
        opt = AdamW(model, tc)
        for step in range(10):
            train_step(model, list(zip(ids, w)), tc, opt, step)
        results.append({k: v.copy() for k, v in model.params.items()})
    for k in results[0]:
        assert np.array_equal(results[0][k], results[1][k])


def test_train_step_returns_per_token_mean():
    model = init_model(CFG, seed=10)
    ids = rand_batch(2, 16, 3)
    w = np.ones((2, 16))
    tc = TrainConfig(total_steps=1, batch_size=2, warmup_steps=1, seed=0)
    opt = AdamW(model, tc)
    loss = train_step(model, list(zip(ids, w)), tc, opt, 0)
    assert abs(loss - np.log(64)) < 0.5  # fresh model near uniform


def test_train_step_grad_accum_close():
    """Accumulated micro-batches match the single-pass gradient step."""
    ids = rand_batch(4, 16, 4)
    w = np.ones((4, 16))
    params = {}
    for accum in (1, 2):
        model = init_model(CFG, seed=11)
        tc = TrainConfig(
            total_steps=1, batch_size=4, grad_accum=accum, warmup_steps=1, seed=0
        )
        opt = AdamW(model, tc)
        train_step(model, list(zip(ids, w)), tc, opt, 0)
        params[accum] = model.params
    for k in params[1]:
        assert np.allclose(params[1][k], params[2][k], atol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_step_divergence_aborts():
    model = init_model(CFG, seed=12)
    ids = rand_batch(2, 16, 5)
    w = np.full((2, 16), 1e30)  # forces a non-finite update path
    tc = TrainConfig(
        total_steps=1, batch_size=2, warmup_steps=1, learning_rate=1e30, seed=0
    )
    opt = AdamW(model, tc)
    train_step(model, list(zip(ids, w)), tc, opt, 0)
    with pytest.raises(TrainingDivergedError) as exc:
        train_step(model, list(zip(ids, w)), tc, opt, 1)
    assert exc.value.step == 1


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(total_steps=0)
    tc = TrainConfig(learning_rate=1.0, warmup_steps=4)
    assert tc.lr_at(0) == pytest.approx(0.25)
    assert tc.lr_at(3) == pytest.approx(1.0)
    assert tc.lr_at(100) == pytest.approx(1.0)


def test_adamw_decoupled_decay():
    """A parameter with zero gradient still shrinks by lr * wd."""
    model = init_model(CFG, seed=13)
    tc = TrainConfig(
        learning_rate=0.1, warmup_steps=1, total_steps=1, weight_decay=0.5, seed=0
    )
    opt = AdamW(model, tc)
    before = model.params["head"].copy()
    zero_grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    opt.step(model, zero_grads, lr=0.1)
    after = model.params["head"]
    assert np.allclose(after, before * (1 - 0.1 * 0.5), atol=1e-7)


# -------------------------------------------------------------- grad check


def test_grad_check_passes():
    model = init_model(CFG, seed=14)
    rng = np.random.default_rng(15)
    seq = TokenSequence(seq_id=0, ids=rng.integers(0, 64, size=32))
    w = rng.uniform(0, 2, size=32)
    assert grad_check(model, seq, w, n_samples=64, seed=0) < 1e-5


def test_grad_check_probe_at_specified_step():
    """The op contract's probe: 16 parameters, h = 1e-4, under 1e-5."""
    model = init_model(CFG, seed=16)
    rng = np.random.default_rng(17)
    seq = TokenSequence(seq_id=0, ids=rng.integers(0, 64, size=24))
    w = np.ones(24)
    assert grad_check(model, seq, w, n_samples=16, h=1e-4, seed=3) < 1e-5


def test_grad_check_zero_weights():
    model = init_model(CFG, seed=18)
    seq = TokenSequence(seq_id=0, ids=np.arange(16, dtype=np.int64))
    assert grad_check(model, seq, np.zeros(16), n_samples=64, seed=0) == 0.0


def test_single_token_gradient_scales_with_weight():
    """Weighted gradient on one token = weight times the unweighted one."""
    model = init_model(CFG, seed=19).copy(dtype=np.float64)
    ids = np.array([[7]], dtype=np.int64)
    _, g1 = loss_and_grads(model, ids, np.array([[1.0]]), denom=1.0)
    _, g2 = loss_and_grads(model, ids, np.array([[2.5]]), denom=1.0)
    for k in g1:
        assert np.allclose(g2[k], 2.5 * g1[k], rtol=1e-12, atol=1e-15)


def test_no_gradient_flows_into_weights():
    """Weights act as constants: scaling them scales the gradient linearly."""
    model = init_model(CFG, seed=20).copy(dtype=np.float64)
    rng = np.random.default_rng(21)
    ids = rng.integers(0, 64, size=(2, 12))
    w = rng.uniform(0.1, 2.0, size=(2, 12))
    _, ga = loss_and_grads(model, ids, w, denom=1.0)
    _, gb = loss_and_grads(model, ids, 3.0 * w, denom=1.0)
    for k in ga:
        assert np.allclose(gb[k], 3.0 * ga[k], rtol=1e-12, atol=1e-15)
