"""Oracles for the optimizer, dropout sparsity and the DCT initialization."""

import numpy as np
import pytest

from factorfield import params
from factorfield.params import (
    AdamState,
    ParamStore,
    adam_step,
    dct_frequency_vectors,
    dct_pattern,
    sample_dropout_mask,
    zero_grads,
)


def reference_adam(values, grads, lr=0.02, b1=0.9, b2=0.99, eps=1e-15):
    """Straight transcription of bias-corrected Adam, one tensor."""
    m = np.zeros_like(values)
    v = np.zeros_like(values)
    x = values.copy()
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
    return x


def test_adam_matches_reference_trajectory():
    rng = np.random.default_rng(0)
    init = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(10)]
    store = ParamStore(dtype=np.float64, seed=0)
    pt = store.create("w", init.shape, init=init.copy())
    state = AdamState()
    for g in grads:
        pt.grad[...] = g
        adam_step(state, store)
    np.testing.assert_allclose(pt.values, reference_adam(init, grads), rtol=1e-12)


def test_adam_first_step_moves_by_lr():
    # With bias correction, |update_1| = lr for any nonzero gradient.
    store = ParamStore(dtype=np.float64, seed=0)
    pt = store.create("w", (3,), init=np.zeros(3))
    pt.grad[...] = np.array([1.0, -2.0, 1e-6])
    state = AdamState(lr=0.02)
    adam_step(state, store)
    np.testing.assert_allclose(np.abs(pt.values), 0.02, rtol=1e-8)


def test_adam_skips_frozen_tensors():
    store = ParamStore(dtype=np.float64, seed=0)
    pt = store.create("w", (2,), init=np.ones(2))
    pt.learnable = False
    pt.grad[...] = 1.0
    adam_step(AdamState(), store)
    np.testing.assert_array_equal(pt.values, np.ones(2))


def test_adam_state_keyed_by_name_not_registration_order():
    rng = np.random.default_rng(1)
    grads = {n: [rng.normal(size=(2,)) for _ in range(5)] for n in ("a", "b")}

    def run(order):
        store = ParamStore(dtype=np.float64, seed=0)
        for n in order:
            store.create(n, (2,), init=np.zeros(2))
        state = AdamState()
        for t in range(5):
            for n in order:
                store[n].grad[...] = grads[n][t]
            adam_step(state, store)
        return {n: store[n].values.copy() for n in order}

    fwd, rev = run(("a", "b")), run(("b", "a"))
    for n in ("a", "b"):
        np.testing.assert_array_equal(fwd[n], rev[n])


def test_adam_accepts_name_keyed_mapping():
    # Two same-named tensors from different signals get independent state.
    store1 = ParamStore(dtype=np.float64, seed=0)
    store2 = ParamStore(dtype=np.float64, seed=0)
    a = store1.create("w", (2,), init=np.zeros(2))
    b = store2.create("w", (2,), init=np.zeros(2))
    a.grad[...] = 1.0
    b.grad[...] = -1.0
    state = AdamState(lr=0.1)
    adam_step(state, {"s0:w": a, "s1:w": b})
    np.testing.assert_allclose(a.values, [-0.1, -0.1], rtol=1e-8)
    np.testing.assert_allclose(b.values, [0.1, 0.1], rtol=1e-8)
    assert set(state.m) == {"s0:w", "s1:w"}


def test_store_create_rejects_duplicates_and_is_seeded():
    s1 = ParamStore(seed=3)
    s2 = ParamStore(seed=3)
    a = s1.create("w", (5, 5), init=0.1)
    b = s2.create("w", (5, 5), init=0.1)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.all(np.abs(a.values) <= 0.1)
    with pytest.raises(ValueError):
        s1.create("w", (1,))


def test_zero_grads_clears_everything():
    store = ParamStore(seed=0)
    pt = store.create("w", (3,), init=0.5)
    pt.grad[...] = 7.0
    zero_grads(store)
    np.testing.assert_array_equal(pt.grad, np.zeros(3))


def test_dropout_mask_statistics_and_bounds():
    rng = np.random.default_rng(0)
    masks = np.stack([sample_dropout_mask(64, 0.25, rng).mask for _ in range(500)])
    assert set(np.unique(masks)) <= {0.0, 1.0}
    assert abs(masks.mean() - 0.75) < 0.02
    assert np.all(sample_dropout_mask(16, 0.0, rng).mask == 1.0)
    with pytest.raises(ValueError):
        sample_dropout_mask(8, 1.0, rng)
    with pytest.raises(ValueError):
        sample_dropout_mask(8, -0.1, rng)


def test_dct_frequency_vectors_enumeration_order():
    # Increasing L1 norm, lexicographic within a norm.
    got = dct_frequency_vectors(2, 8)
    assert got == [(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0), (0, 3), (1, 2)]
    got3 = dct_frequency_vectors(3, 5)
    assert got3 == [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0), (0, 0, 2)]


def test_dct_pattern_matches_direct_formula():
    shape = (5, 7)
    kappa = (2, 3)
    got = dct_pattern(shape, kappa)
    for i in range(5):
        for j in range(7):
            want = np.cos(np.pi * 2 * (2 * i + 1) / 10) * np.cos(np.pi * 3 * (2 * j + 1) / 14)
            assert got[i, j] == pytest.approx(want, rel=1e-12)


def test_dct_patterns_are_orthogonal():
    # Distinct DCT-II frequency vectors are orthogonal under the plain dot product.
    shape = (8, 8)
    vecs = dct_frequency_vectors(2, 6)
    pats = [dct_pattern(shape, k).reshape(-1) for k in vecs]
    for i in range(len(pats)):
        for j in range(i + 1, len(pats)):
            assert abs(pats[i] @ pats[j]) < 1e-9


def test_dct_init_fills_channels_with_increasing_frequencies():
    store = ParamStore(dtype=np.float64, seed=0)
    grid = store.create("g", (6, 6, 3), init=0.1)
    params.dct_init(grid, 3)
    np.testing.assert_allclose(grid.values[..., 0], 1.0)  # kappa = (0, 0)
    np.testing.assert_allclose(grid.values[..., 1], dct_pattern((6, 6), (0, 1)))
    np.testing.assert_allclose(grid.values[..., 2], dct_pattern((6, 6), (1, 0)))
