import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msrs_lab import tensor as T
from msrs_lab.tensor import ShapeError, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_dot():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_backward_oracle():
    a, b = leaf([[1, 2]]), leaf([[3], [4]])
    g = T.backward(T.total(T.matmul(a, b)), {"a": a, "b": b})
    np.testing.assert_allclose(g["a"], [[3, 4]])
    np.testing.assert_allclose(g["b"], [[1], [2]])
    # the same numbers from central differences at h=1e-6
    f = lambda x: float((x @ b.data)[0, 0])
    assert T.finite_difference_check(f, a.data, g["a"], h=1e-6) < 1e-8


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- elementwise -------------------------------------------------------------

def test_sigmoid_zero():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_tanh_zero_and_slope():
    x = leaf([0.0])
    y = T.tanh(x)
    assert y.data[0] == 0.0
    assert T.backward(T.total(y), [x])[id(x)][0] == 1.0


def test_gelu_derivative_at_one():
    x = leaf([1.0])
    g = T.backward(T.total(T.gelu(x)), [x])[id(x)]
    f = lambda v: float(T.gelu(Tensor(v)).data.sum())
    assert T.finite_difference_check(f, [1.0], g) < 1e-5
    # exact form: x * Phi(x)
    assert T.gelu(Tensor([1.0])).data[0] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-15)


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_binary_shape_mismatch(op):
    with pytest.raises(ShapeError):
        op(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_stable_sigmoid_extremes():
    s = T.stable_sigmoid(np.array([-1e6, 1e6, 0.0]))
    assert np.all(np.isfinite(s))
    assert s.tolist() == [0.0, 1.0, 0.5]


# -- residual block ----------------------------------------------------------

def _block(rng, w=4, n=3):
    return (leaf(rng.standard_normal((n, w))), leaf(rng.standard_normal((w, w))),
            leaf(rng.standard_normal(w)), leaf(rng.standard_normal((w, w))),
            leaf(rng.standard_normal(w)))


def test_residual_zero_layerscale_is_identity():
    rng = np.random.default_rng(0)
    x, w1, b1, w2, b2 = _block(rng)
    d = leaf(np.zeros(4))
    y = T.residual_block_forward(x, w1, b1, w2, b2, "tanh", d)
    np.testing.assert_array_equal(y.data, x.data)
    up = rng.standard_normal((3, 4))
    g = T.backward(T.total(T.mul(y, Tensor(up))), [x])[id(x)]
    np.testing.assert_array_equal(g, up)


def test_residual_zero_weights_is_identity():
    x = Tensor(np.arange(8.0).reshape(2, 4))
    z = Tensor(np.zeros((4, 4)))
    zb = Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.residual_block_forward(x, z, zb, z, zb).data, x.data)


def test_residual_bad_layerscale():
    rng = np.random.default_rng(1)
    with pytest.raises(ShapeError):
        T.residual_block_forward(*_block(rng), "tanh", Tensor(np.ones(3)))


def test_residual_block_gradcheck():
    rng = np.random.default_rng(2)
    parts = _block(rng)
    d = leaf(rng.uniform(0.5, 1.0, 4))
    inputs = list(parts) + [d]

    def loss(vals):
        return T.total(T.residual_block_forward(*vals[:5], "tanh", vals[5]))

    grads = T.backward(loss(inputs), inputs)
    for i, t in enumerate(inputs):
        def f(x, i=i):
            vals = [Tensor(v.data) for v in inputs]
            vals[i] = Tensor(x)
            return float(loss(vals).data)
        assert T.finite_difference_check(f, t.data, grads[id(t)]) < 1e-5


# -- losses ------------------------------------------------------------------

def test_mse_zero():
    p = Tensor(np.ones((3, 2)))
    assert T.mse_loss(p, Tensor(np.ones((3, 2)))).data == 0.0


def test_cross_entropy_uniform():
    z = Tensor(np.zeros((5, 4)))
    assert float(T.cross_entropy_loss(z, [0, 1, 2, 3, 0]).data) == pytest.approx(1.386294, abs=1e-6)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        T.cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 3])


def test_mse_gradcheck():
    rng = np.random.default_rng(3)
    p, y = leaf(rng.standard_normal((3, 2))), rng.standard_normal((3, 2))
    g = T.backward(T.mse_loss(p, Tensor(y)), [p])[id(p)]
    f = lambda x: float(T.mse_loss(Tensor(x), Tensor(y)).data)
    assert T.finite_difference_check(f, p.data, g) < 1e-5


# -- backward ----------------------------------------------------------------

def test_backward_identity_and_square():
    th = leaf([2.5])
    assert T.backward(T.total(th), [th])[id(th)].tolist() == [1.0]
    th = leaf([1.0, -2.0, 3.0])
    np.testing.assert_allclose(T.backward(T.total(T.mul(th, th)), [th])[id(th)], [2, -4, 6])


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        T.backward(T.tanh(leaf([1.0, 2.0])))


def test_backward_unreached_param_is_zero():
    a, b = leaf([1.0, 2.0]), leaf([[1.0]])
    g = T.backward(T.total(a), {"a": a, "b": b})
    np.testing.assert_array_equal(g["b"], [[0.0]])


def test_record_is_topological():
    a = leaf([1.0])
    b = T.tanh(a)
    c = T.mul(b, a)
    order = T.record(T.total(c))
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    assert len(pos) == len(order)


def test_three_block_model_gradcheck():
    from msrs_lab.tasks import ModelSpec, build_model

    model = build_model(ModelSpec(depth=3, width=5, d_in=3, d_out=2), 4)
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    names = list(model.plain) + list(model.masked)
    base = {**model.plain, **model.thetas()}

    def loss(vals):
        return T.mse_loss(model.forward(Tensor(x), vals), Tensor(y))

    leaves = {k: leaf(v) for k, v in base.items()}
    grads = T.backward(loss(leaves), leaves)
    for k in names:
        def f(v, k=k):
            vals = {n: Tensor(a) for n, a in base.items()}
            vals[k] = Tensor(v)
            return float(loss(vals).data)
        assert T.finite_difference_check(f, base[k], grads[k]) < 1e-5, k


# -- finite differences ------------------------------------------------------

def test_fd_square():
    assert T.finite_difference_check(lambda x: float(x[0] ** 2), [3.0], [6.0]) < 1e-9


def test_fd_linear_exact():
    x = np.array([0.3, -1.2, 4.0])
    assert T.finite_difference_check(lambda v: float(v.sum()), x, np.ones(3)) < 1e-9


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        T.finite_difference_check(lambda v: 0.0, [1.0], [0.0], h=0.0)


# -- properties --------------------------------------------------------------

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), st.floats(0.1, 10))
def test_backward_linear_in_upstream(x, c):
    t = leaf(x)
    loss = T.total(T.tanh(T.matmul(t, Tensor(np.ones((4, 2))))))
    g1 = T.backward(loss, [t], upstream=1.0)[id(t)]
    g2 = T.backward(loss, [t], upstream=2.0 * c)[id(t)]
    np.testing.assert_allclose(g2, 2.0 * c * g1, rtol=0, atol=1e-12 * max(1.0, c))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite))
def test_forward_backward_deterministic(x):
    def run():
        t = leaf(x)
        y = T.total(T.gelu(T.layer_norm(t, Tensor(np.ones(3)), Tensor(np.zeros(3)))))
        return y.data.tobytes(), T.backward(y, [t])[id(t)].tobytes()
    assert run() == run()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-50, 50)))
def test_outputs_finite(x):
    t = leaf(x)
    y = T.total(T.sigmoid(T.tanh(t)))
    assert np.isfinite(y.data)
    assert np.all(np.isfinite(T.backward(y, [t])[id(t)]))
