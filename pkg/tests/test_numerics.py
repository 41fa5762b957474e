"""Masked cross-entropy, AdamW, ParamStore, and the gradient checker.

Expected values are frozen from independent hand computations (closed-form
softmax NLL, one optimizer step worked by hand), not from the code under
test.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechsel import numerics
from speechsel.errors import (
    EmptyMask,
    EmptyTrainableSet,
    IndexOutOfRange,
    NonDeterministicLoss,
    ShapeMismatch,
    UnknownParameter,
)
from speechsel.numerics import (
    ParamStore,
    adamw_step,
    cross_entropy_masked,
    cross_entropy_masked_with_grad,
    grad_check,
    log_softmax,
    softmax,
)


# --- cross entropy -----------------------------------------------------------

def test_uniform_logits_give_log_vocab():
    logits = np.zeros((3, 4), dtype=np.float32)
    targets = np.array([0, 1, 3])
    mask = np.ones(3, dtype=bool)
    loss = cross_entropy_masked(logits, targets, mask)
    assert loss == pytest.approx(math.log(4.0), abs=1e-7)


def test_two_row_hand_case():
    # row [2, 0] with target 0: -log(e^2 / (e^2 + 1)) = log(1 + e^-2); same
    # for row [0, 2] target 1, so the mean equals log(1 + e^-2).
    logits = np.array([[2.0, 0.0], [0.0, 2.0]])
    targets = np.array([0, 1])
    mask = np.ones(2, dtype=bool)
    expected = math.log(1.0 + math.exp(-2.0))  # 0.126928011...
    assert cross_entropy_masked(logits, targets, mask) == pytest.approx(expected, abs=1e-12)


def test_mask_excludes_rows():
    logits = np.array([[2.0, 0.0], [123.0, -55.0]])
    targets = np.array([0, 1])
    mask = np.array([True, False])
    expected = math.log(1.0 + math.exp(-2.0))
    assert cross_entropy_masked(logits, targets, mask) == pytest.approx(expected, abs=1e-12)
    # perturbing an unmasked row never changes the loss
    logits2 = logits.copy()
    logits2[1] = [9e4, -9e4]
    assert cross_entropy_masked(logits2, targets, mask) == cross_entropy_masked(
        logits, targets, mask
    )


def test_empty_mask_raises():
    with pytest.raises(EmptyMask):
        cross_entropy_masked(np.zeros((2, 3)), np.array([0, 1]), np.zeros(2, dtype=bool))


def test_target_out_of_range_raises():
    with pytest.raises(IndexOutOfRange):
        cross_entropy_masked(np.zeros((2, 3)), np.array([0, 3]), np.ones(2, dtype=bool))


def test_ce_grad_structure():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 5))
    targets = np.array([1, 0, 4, 2])
    mask = np.array([True, False, True, False])
    loss, grad = cross_entropy_masked_with_grad(logits, targets, mask)
    assert np.all(grad[~mask] == 0.0)
    p = softmax(logits[0])
    p[1] -= 1.0
    np.testing.assert_allclose(grad[0], p / 2.0, atol=1e-12)
    # gradient rows over the vocab sum to zero on masked rows
    np.testing.assert_allclose(grad[mask].sum(axis=1), 0.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_uniform_logits_log_vocab_any_mask(vocab, rows, seed):
    rng = np.random.default_rng(seed)
    c = rng.normal()
    logits = np.full((rows, vocab), c)
    targets = rng.integers(0, vocab, size=rows)
    mask = np.zeros(rows, dtype=bool)
    mask[rng.integers(0, rows)] = True
    extra = rng.random(rows) < 0.5
    mask |= extra
    assert cross_entropy_masked(logits, targets, mask) == pytest.approx(
        math.log(vocab), rel=1e-12
    )


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(2, 10), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    rng = np.random.default_rng(seed)
    logits = (rng.normal(size=(rows, cols)) * 30.0).astype(np.float32)
    p = softmax(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.exp(log_softmax(logits)).sum(axis=1), 1.0, atol=1e-6)


# --- ParamStore / AdamW -------------------------------------------------------

def make_store(**tensors):
    store = ParamStore()
    for name, (value, trainable) in tensors.items():
        store.add(name, value, trainable)
    return store


def test_adamw_single_step_hand_case():
    # w=1, g=1, lr=0.1, step 1: m_hat = v_hat = 1, so w ~ 1 - 0.1/(1+1e-8).
    w = np.array([1.0])
    store = make_store(w=(w, True))
    adamw_step(store, {"w": np.array([1.0])}, lr=0.1)
    assert store["w"][0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)


def test_adamw_decay_only():
    # zero gradient, weight_decay 0.01, lr 0.1: moments stay zero so the
    # update is pure decay, w * (1 - 0.001).
    w = np.array([2.0, -3.0])
    store = make_store(w=(w.copy(), True))
    adamw_step(store, {"w": np.zeros(2)}, lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(store["w"], w * (1.0 - 0.001), atol=1e-15)


def test_adamw_untouched_params_bit_identical():
    rng = np.random.default_rng(1)
    frozen = rng.normal(size=(3, 3)).astype(np.float32)
    store = make_store(a=(rng.normal(size=4), True), b=(frozen, False))
    before = store["b"].tobytes()
    adamw_step(store, {"a": rng.normal(size=4)}, lr=0.01, weight_decay=0.1)
    assert store["b"].tobytes() == before
    assert "b" not in store.opt_m  # frozen tensors carry no optimizer state


def test_adamw_deterministic_bitwise():
    rng = np.random.default_rng(2)
    w0 = rng.normal(size=(5,)).astype(np.float32)
    g = rng.normal(size=(5,)).astype(np.float32)
    outs = []
    for _ in range(2):
        store = make_store(w=(w0.copy(), True))
        for _ in range(7):
            adamw_step(store, {"w": g}, lr=3e-3, weight_decay=0.01)
        outs.append(store["w"].tobytes())
    assert outs[0] == outs[1]


def test_adamw_rejects_bad_inputs():
    store = make_store(w=(np.zeros(2), True), f=(np.zeros(2), False))
    with pytest.raises(UnknownParameter):
        adamw_step(store, {"nope": np.zeros(2)})
    with pytest.raises(UnknownParameter):
        adamw_step(store, {"f": np.zeros(2)})  # frozen
    with pytest.raises(ShapeMismatch):
        adamw_step(store, {"w": np.zeros(3)})
    with pytest.raises(ValueError):
        adamw_step(store, {"w": np.zeros(2)}, beta1=1.0)


def test_set_trainable_drops_state():
    store = make_store(w=(np.ones(2), True))
    adamw_step(store, {"w": np.ones(2)})
    assert "w" in store.opt_m
    store.set_trainable("w", False)
    assert "w" not in store.opt_m and "w" not in store.opt_step


# --- grad_check ---------------------------------------------------------------

def _linear_softmax_loss(x, y):
    """Loss closure for a tiny linear-softmax classifier (6 parameters)."""

    def loss_fn(store):
        logits = x @ store["w"].T + store["b"]
        mask = np.ones(x.shape[0], dtype=bool)
        loss, gl = cross_entropy_masked_with_grad(logits, y, mask)
        grads = {"w": gl.T @ x, "b": gl.sum(axis=0)}
        return loss, grads

    return loss_fn


def test_grad_check_linear_softmax():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 2))
    y = rng.integers(0, 2, size=8)
    store = make_store(w=(rng.normal(size=(2, 2)), True), b=(np.zeros(2), True))
    err = grad_check(_linear_softmax_loss(x, y), store)
    assert err <= 1e-8


def test_grad_check_requires_float64():
    store = make_store(w=(np.zeros(2, dtype=np.float32), True))
    with pytest.raises(ValueError):
        grad_check(lambda s: (0.0, {"w": np.zeros(2, dtype=np.float32)}), store)


def test_grad_check_empty_trainable():
    store = make_store(w=(np.zeros(2), False))
    with pytest.raises(EmptyTrainableSet):
        grad_check(lambda s: (0.0, {}), store)


def test_grad_check_detects_nondeterminism():
    store = make_store(w=(np.zeros(2), True))
    state = {"n": 0}

    def fn(s):
        state["n"] += 1
        return float(state["n"]), {"w": np.zeros(2)}

    with pytest.raises(NonDeterministicLoss):
        grad_check(fn, store)


def test_store_astype_is_deep():
    store = make_store(w=(np.ones(2, dtype=np.float32), True))
    d64 = store.astype(np.float64)
    d64["w"][0] = 5.0
    assert store["w"][0] == 1.0
    assert d64["w"].dtype == np.float64
