import numpy as np
import pytest
from hypothesis import given, strategies as st

from diffrec.data import InteractionMatrix
from diffrec.diffusion import TrainConfig, train
from diffrec.errors import ConfigError, DataError
from diffrec.temporal import apply_temporal, position_weights, reweight


def test_three_interactions():
    h = reweight([4, 0, 2], 5, 0.1, 1.0)
    np.testing.assert_allclose(h.weights, [0.1, 0.55, 1.0])
    np.testing.assert_allclose(h.vector, [0.55, 0, 1.0, 0, 0.1])


def test_single_interaction_gets_w_max():
    np.testing.assert_array_equal(reweight([2], 3, 0.3, 1.0).weights, [1.0])
    np.testing.assert_array_equal(position_weights(1, 0.2, 0.7), [0.7])


def test_unit_weights_reproduce_binary_vector():
    h = reweight([1, 3], 4, 1.0, 1.0)
    np.testing.assert_array_equal(h.vector, [0, 1, 0, 1])


@pytest.mark.parametrize("seq,n", [([1, 1], 3), ([5], 3), ([-1], 3)])
def test_bad_sequences(seq, n):
    with pytest.raises(DataError):
        reweight(seq, n)


@pytest.mark.parametrize("lo,hi", [(0.0, 1.0), (0.6, 0.5), (0.5, 1.2)])
def test_bad_bounds(lo, hi):
    with pytest.raises(ConfigError):
        reweight([0], 2, lo, hi)


@given(st.permutations(list(range(8))), st.integers(1, 8), st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_weight_properties(perm, m, w_min, frac):
    w_max = w_min + frac * (1.0 - w_min)
    seq = perm[:m]
    h = reweight(seq, 8, w_min, w_max)
    assert np.all(np.diff(h.weights) >= 0)
    assert np.all((h.weights >= w_min - 1e-15) & (h.weights <= w_max + 1e-15))
    assert np.count_nonzero(h.vector) == m
    rev = reweight(seq[::-1], 8, w_min, w_max)
    np.testing.assert_allclose(rev.weights, h.weights)
    np.testing.assert_allclose(rev.vector[seq], h.weights[::-1])


def test_apply_temporal_orders_by_time_then_input():
    m = InteractionMatrix.from_arrays(2, 4, [0, 0, 0, 1], [2, 0, 1, 3], None, [30, 10, 10, 5])
    w = apply_temporal(m, 0.2, 1.0)
    d = w.dense()
    # user 0: item 0 (t=10, earlier line), item 1 (t=10), item 2 (t=30)
    np.testing.assert_allclose(d[0], [0.2, 0.6, 1.0, 0.0])
    np.testing.assert_allclose(d[1], [0, 0, 0, 1.0])


def test_apply_temporal_needs_timestamps():
    m = InteractionMatrix.from_arrays(1, 3, [0, 0], [0, 1])
    with pytest.raises(ConfigError):
        apply_temporal(m)


def test_row_sums_never_grow():
    rng = np.random.default_rng(0)
    u, i = np.nonzero(rng.random((20, 15)) < 0.3)
    m = InteractionMatrix.from_arrays(20, 15, u, i, None, rng.integers(0, 100, len(u)))
    w = apply_temporal(m, 0.3, 1.0)
    assert np.all(w.dense().sum(1) <= m.dense().sum(1) + 1e-12)


def test_all_singletons_give_w_max():
    m = InteractionMatrix.from_arrays(3, 3, [0, 1, 2], [2, 0, 1], None, [1, 2, 3])
    np.testing.assert_array_equal(apply_temporal(m, 0.3, 0.8).weights, [0.8] * 3)


def test_unit_weights_training_bit_identical():
    rng = np.random.default_rng(1)
    u, i = np.nonzero(rng.random((30, 12)) < 0.3)
    m = InteractionMatrix.from_arrays(30, 12, u, i, None, rng.integers(1, 100, len(u)))
    cfg = TrainConfig(epochs=2, batch_size=10, hidden=(6,))
    a = train(m, cfg).net.params
    b = train(apply_temporal(m, 1.0, 1.0), cfg).net.params
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
