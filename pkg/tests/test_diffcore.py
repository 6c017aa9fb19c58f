"""Unit tests for the reverse-mode autodiff core."""

import numpy as np
import pytest

from poisonlab import diffcore as dc

from _gradcases import ALL_CASES, run_case
from _oracles import conv2d_loops, max_pool_loops, well_spaced


def test_identity_forward():
    x = dc.tensor([[1.0, -2.0], [3.0, 4.0]])
    assert np.array_equal(x.data, np.array([[1.0, -2.0], [3.0, 4.0]]))


def test_relu_forward_example():
    y = dc.relu(dc.tensor([-1.0, 0.5]))
    assert np.array_equal(y.data, [0.0, 0.5])


def test_softmax_forward_example():
    y = dc.softmax(dc.tensor([0.0, 0.0]))
    assert np.allclose(y.data, [0.5, 0.5], atol=0, rtol=0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    y = dc.softmax(dc.tensor(rng.standard_normal((5, 9)) * 10))
    assert np.allclose(y.data.sum(axis=1), 1.0, atol=1e-12)


def test_cross_entropy_example():
    # oracle: -log softmax(logits)[label] computed directly
    logits = np.array([1.0, 2.0, 3.0])
    expected = np.log(np.exp(logits).sum()) - logits[2]
    out = dc.cross_entropy(dc.tensor(logits), 2)
    assert abs(out.item() - expected) < 1e-12


def test_square_gradient():
    x = dc.tensor([1.5, -2.0, 0.25], requires_grad=True)
    y = dc.reduce_sum(dc.mul(x, x))
    (g,) = dc.grad(y, [x])
    assert np.allclose(g, 2 * x.data, atol=1e-15)


def test_constant_function_zero_gradient():
    x = dc.tensor([1.0, 2.0], requires_grad=True)
    y = dc.reduce_sum(dc.mul(x, dc.constant([0.0, 0.0]))) + dc.tensor(5.0, requires_grad=True)
    # x contributes through a zero factor only
    gx = dc.grad(y, [x])[0]
    assert np.array_equal(gx, np.zeros(2))


def test_unused_leaf_gets_zeros():
    x = dc.tensor([1.0], requires_grad=True)
    z = dc.tensor([2.0], requires_grad=True)
    y = dc.reduce_sum(dc.mul(z, z))
    gx = dc.grad(y, [x])[0]
    assert np.array_equal(gx, np.zeros(1))


def test_backward_accumulates_fanout():
    x = dc.tensor([3.0], requires_grad=True)
    y = dc.add(dc.mul(x, x), dc.scale(x, 4.0))  # x^2 + 4x
    (g,) = dc.grad(y, [x], seed=np.ones(1))
    assert np.allclose(g, [10.0])


def test_backward_twice_is_consistent():
    x = dc.tensor([2.0], requires_grad=True)
    y = dc.mul(x, x)
    g1 = dc.grad(y, [x], seed=np.ones(1))[0].copy()
    g2 = dc.grad(y, [x], seed=np.ones(1))[0]
    assert np.array_equal(g1, g2)


def test_seed_shape_mismatch_rejected():
    x = dc.tensor([1.0, 2.0], requires_grad=True)
    y = dc.mul(x, x)
    with pytest.raises(dc.GraphUsageError):
        dc.backward(y, seed=np.ones(3))


def test_matmul_shape_mismatch_names_op():
    a = dc.tensor(np.ones((2, 3)))
    b = dc.tensor(np.ones((2, 3)))
    with pytest.raises(dc.ShapeError, match="matmul"):
        dc.matmul(a, b)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(dc.ShapeError, match="cross_entropy"):
        dc.cross_entropy(dc.tensor([0.0, 1.0]), 2)


def test_conv2d_channel_mismatch_names_op():
    x = dc.tensor(np.ones((1, 4, 4, 3)))
    w = dc.tensor(np.ones((3, 3, 2, 5)))
    with pytest.raises(dc.ShapeError, match="conv2d"):
        dc.conv2d(x, w)


def test_broadcast_bias_gradient_sums_batch():
    rng = np.random.default_rng(3)
    x = dc.tensor(rng.standard_normal((6, 4)))
    b = dc.tensor(np.zeros(4), requires_grad=True)
    y = dc.reduce_sum(dc.add(x, b))
    (gb,) = dc.grad(y, [b])
    assert np.allclose(gb, np.full(4, 6.0))


def test_take_scatter_are_adjoint():
    # <take(a), y> == <a, scatter(y)> for random index maps
    rng = np.random.default_rng(11)
    for _ in range(20):
        a = rng.standard_normal(12)
        idx = rng.integers(0, 12, size=9)
        y = rng.standard_normal(9)
        lhs = float(a[idx] @ y)
        scat = np.bincount(idx, weights=y, minlength=12)
        rhs = float(a @ scat)
        assert abs(lhs - rhs) < 1e-12
        ta = dc.tensor(a)
        assert np.array_equal(dc.take(ta, idx).data, a[idx])
        ty = dc.tensor(y)
        assert np.allclose(dc.scatter_add(ty, idx, (12,)).data, scat, atol=1e-15)


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 5, 5, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    got = dc.conv2d(dc.tensor(x), dc.tensor(w), dc.tensor(b), pad=1).data
    want = conv2d_loops(x, w, b, pad=1)
    assert np.allclose(got, want, atol=1e-12)
    got0 = dc.conv2d(dc.tensor(x), dc.tensor(w), None, pad=0).data
    want0 = conv2d_loops(x, w, None, pad=0)
    assert np.allclose(got0, want0, atol=1e-12)


def test_max_pool_matches_loop_oracle():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 7, 7, 2))
    got, _ = dc.max_pool2d(dc.tensor(x), 3)
    want = max_pool_loops(x, 3)
    assert np.allclose(got.data, want, atol=0)


def test_max_pool_gradient_routes_to_argmax():
    x = well_spaced(np.random.default_rng(8), (1, 3, 3, 1))
    t = dc.tensor(x, requires_grad=True)
    y, idx = dc.max_pool2d(t, 3)
    (g,) = dc.grad(dc.reduce_sum(y), [t])
    assert g.sum() == 1.0
    assert g.ravel()[int(idx.ravel()[0])] == 1.0


@pytest.mark.parametrize("name,builder", ALL_CASES)
def test_primitive_gradients_smoke(name, builder):
    rng = np.random.default_rng(abs(hash(name)) % (2**32))
    for _ in range(5):
        assert run_case(builder, rng) < 1e-4, name


def test_gradients_bitwise_deterministic():
    def build(seed):
        rng = np.random.default_rng(seed)
        x = dc.tensor(rng.standard_normal((4, 6, 6, 3)), requires_grad=True)
        w = dc.tensor(rng.standard_normal((3, 3, 3, 5)), requires_grad=True)
        y, _ = dc.max_pool2d(dc.relu(dc.conv2d(x, w, None, pad=1)), 3)
        loss = dc.cross_entropy(dc.flatten_batch(y), np.array([0, 1, 2, 3]))
        return dc.grad(loss, [x, w])

    g1 = build(42)
    g2 = build(42)
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


def test_float32_mode_switch():
    dc.set_default_dtype(np.float32)
    try:
        t = dc.tensor([1.0, 2.0])
        assert t.data.dtype == np.float32
    finally:
        dc.set_default_dtype(np.float64)
    assert dc.tensor([1.0]).data.dtype == np.float64
