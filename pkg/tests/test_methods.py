import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msrs_lab.methods import (LayerShape, SparseMethodConfig, condense, dense_masked_grads_step,
                              erk_densities, erk_init, erk_magnitude_init, gmp_schedule,
                              magnitude_prune, rigl_prune_grow, round_half_up, set_prune_grow,
                              sparse_continue_step, zeta_schedule)
from msrs_lab.tensor import ShapeError


def test_config_validation():
    for kw in [{"method": "lottery"}, {"target_sparsity": 1.0}, {"prune_grow_fraction": 1.5},
               {"update_interval": 0}, {"gmp_scope": "blocks"}]:
        with pytest.raises(ValueError):
            SparseMethodConfig(**kw)


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.49)] == [1, 2, 3, 2]


# -- condense / masked steps -------------------------------------------------

def test_condense():
    th = {"a": np.array([1.0, 2.0, 3.0])}
    np.testing.assert_array_equal(condense(th, {"a": np.array([1.0, 0, 1])})["a"], [1, 0, 3])
    np.testing.assert_array_equal(condense(th, {"a": np.ones(3)})["a"], th["a"])
    np.testing.assert_array_equal(condense(th, {"a": np.zeros(3)})["a"], 0)
    with pytest.raises(ShapeError):
        condense(th, {"a": np.ones(2)})


def test_sparse_continue_step():
    g = {"a": np.array([0.5, -0.5])}
    np.testing.assert_array_equal(sparse_continue_step(g, {"a": np.array([0.0, 1])})["a"], [0, -0.5])
    np.testing.assert_array_equal(sparse_continue_step(g, {"a": np.ones(2)})["a"], g["a"])


def test_dense_masked_grads_step():
    out = dense_masked_grads_step({"a": np.array([1.0, 2.0]), "b": np.ones(1)}, {"a": np.array([0.0, 1])})
    np.testing.assert_array_equal(out["a"], [0, 2])
    np.testing.assert_array_equal(out["b"], [1])
    with pytest.raises(ShapeError):
        dense_masked_grads_step({"a": np.ones(3)}, {"a": np.ones(2)})


# -- ERK ---------------------------------------------------------------------

def test_erk_worked_example():
    layers = [LayerShape("big", 100, 100), LayerShape("small", 10, 10)]
    dens, c = erk_densities(layers, 0.9)
    assert c == pytest.approx(1010 / 220, rel=1e-12)
    assert dens["big"] == pytest.approx(0.091818, abs=1e-6)
    assert dens["small"] == pytest.approx(0.91818, abs=1e-5)
    masks = erk_init(layers, 0.9, 0)
    nnz = {k: int(m.sum()) for k, m in masks.items()}
    assert nnz == {"big": 918, "small": 92}
    assert sum(nnz.values()) == 1010


def test_erk_single_layer_and_dense():
    dens, _ = erk_densities([LayerShape("a", 7, 9)], 0.3)
    assert dens["a"] == pytest.approx(0.7)
    dens, _ = erk_densities([LayerShape("a", 7, 9), LayerShape("b", 3, 3)], 0.0)
    assert all(d == pytest.approx(1.0) for d in dens.values())


def test_erk_capping():
    layers = [LayerShape("tiny", 2, 2), LayerShape("huge", 200, 200)]
    dens, c = erk_densities(layers, 0.5)
    assert dens["tiny"] == 1.0
    assert dens["huge"] * 40000 + 4 == pytest.approx(0.5 * 40004)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 40), st.integers(1, 40)), min_size=1, max_size=5),
       st.floats(0.0, 0.95))
def test_erk_count_within_rounding(shapes, s):
    layers = [LayerShape(f"l{i}", a, b) for i, (a, b) in enumerate(shapes)]
    total = sum(l.count for l in layers)
    masks = erk_init(layers, s, 3)
    nnz = sum(int(m.sum()) for m in masks.values())
    assert abs(nnz - (1 - s) * total) <= len(layers) * 0.5 + 1e-6
    dens, c = erk_densities(layers, s)
    for l in layers:
        if dens[l.name] < 1.0:
            assert dens[l.name] == pytest.approx(c * (l.fan_in + l.fan_out) / l.count)


def test_erk_magnitude_keeps_largest():
    w = {"a": np.array([[0.1, -0.9], [0.5, 0.05]])}
    m = erk_magnitude_init(w, 0.5)
    np.testing.assert_array_equal(m["a"], [[0, 1], [1, 0]])


# -- GMP ---------------------------------------------------------------------

def test_gmp_schedule():
    assert gmp_schedule(10, 10, 100, 0.0, 0.4) == 0.0
    assert gmp_schedule(110, 10, 100, 0.0, 0.4) == 0.4
    assert gmp_schedule(60, 10, 100, 0.0, 0.4) == pytest.approx(0.35, abs=1e-15)
    assert gmp_schedule(-5, 10, 100, 0.0, 0.4) == 0.0
    assert gmp_schedule(500, 10, 100, 0.0, 0.4) == 0.4


def test_magnitude_prune():
    w = {"a": np.array([0.9, -0.05, 0.4, 0.01])}
    np.testing.assert_array_equal(magnitude_prune(w, 0.5)["a"], [1, 0, 1, 0])
    np.testing.assert_array_equal(magnitude_prune(w, 0.0)["a"], [1, 1, 1, 1])
    np.testing.assert_array_equal(magnitude_prune({"a": np.array([0.5, 0.5, 0.5])}, 1 / 3)["a"], [0, 1, 1])


def test_magnitude_prune_global():
    w = {"a": np.array([1.0, 2.0]), "b": np.array([0.1, 0.2, 3.0])}
    m = magnitude_prune(w, 0.4, "global")
    np.testing.assert_array_equal(m["a"], [1, 1])
    np.testing.assert_array_equal(m["b"], [0, 0, 1])


def test_gmp_masks_nested_for_frozen_weights():
    rng = np.random.default_rng(0)
    w = {"a": rng.standard_normal((8, 8))}
    prev = np.ones((8, 8))
    for t in range(0, 101, 5):
        m = magnitude_prune(w, gmp_schedule(t, 0, 100, 0.0, 0.7))["a"]
        assert np.all(m <= prev)
        prev = m


# -- prune and grow ----------------------------------------------------------

def test_set_example():
    w = np.array([0.9, -0.05, 0.4, 0.01, 0.0, 0.0])
    m = np.array([1.0, 1, 1, 1, 0, 0])
    new, short = set_prune_grow(w, m, 0.5, 0)
    np.testing.assert_array_equal(new, [1, 0, 1, 0, 1, 1])
    assert short == 0 and new.sum() == 4


def test_set_zeta_zero_unchanged():
    m = np.array([1.0, 0, 1, 0])
    np.testing.assert_array_equal(set_prune_grow(np.arange(4.0), m, 0.0, 1)[0], m)


def test_set_shortfall_reported():
    w = np.array([0.3, 0.2, 0.1])
    new, short = set_prune_grow(w, np.array([1.0, 1, 0]), 1.0, 0)
    # only one free slot that was not just pruned
    assert short == 1 and new.sum() == 1


def test_rigl_grows_largest_gradient():
    w = np.array([0.9, 0.01, 0.0, 0.0, 0.0])
    m = np.array([1.0, 1, 0, 0, 0])
    g = np.array([0.0, 0.0, 0.1, 0.9, 0.5])
    new, _ = rigl_prune_grow(w, g, m, 0.5)
    np.testing.assert_array_equal(new, [1, 0, 0, 1, 0])


def test_rigl_tie_break_lowest_index():
    m = np.array([1.0, 1, 0, 0, 0, 0])
    new, _ = rigl_prune_grow(np.array([1.0, 2, 0, 0, 0, 0]), np.ones(6), m, 0.5)
    np.testing.assert_array_equal(new, [0, 1, 1, 0, 0, 0])


@pytest.mark.parametrize("method", ["set", "rigl"])
def test_popcount_conserved_over_1000_events(method):
    rng = np.random.default_rng(42)
    w = rng.standard_normal((12, 10))
    m = (rng.random((12, 10)) < 0.4).astype(float)
    count = m.sum()
    for t in range(1000):
        zeta = rng.uniform(0, 0.6)
        if method == "set":
            m, short = set_prune_grow(w, m, zeta, np.random.default_rng([7, t]))
        else:
            m, short = rigl_prune_grow(w, rng.standard_normal(w.shape), m, zeta)
        assert short == 0
        assert m.sum() == count
        w = w + 0.1 * rng.standard_normal(w.shape) * m


def test_zeta_schedule():
    assert zeta_schedule(0, 100, 0.3) == 0.3
    assert zeta_schedule(100, 100, 0.3) == pytest.approx(0.0, abs=1e-16)
    assert zeta_schedule(50, 100, 0.3) == pytest.approx(0.15)
