import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqpan import autograd as ag
from seqpan.autograd import ShapeError, Tensor, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def fd_derivative(f, x, eps=1e-5):
    """Central difference of a scalar numpy function, entry by entry."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        out[i] = (f(xp) - f(xm)) / (2 * eps)
    return out


# -- elementwise ---------------------------------------------------------

def test_sigmoid_value_and_slope_at_zero():
    x = leaf([0.0])
    y = ag.sigmoid(x)
    assert y.data[0] == 0.5
    y.sum().backward()
    assert x.grad[0] == 0.25
    numeric = fd_derivative(lambda v: 1 / (1 + np.exp(-v[0])), [0.0])[0]
    assert abs(x.grad[0] - numeric) < 1e-8


def test_sigmoid_is_stable_for_large_inputs():
    y = ag.sigmoid(Tensor([-800.0, 800.0]))
    assert np.all(np.isfinite(y.data))
    np.testing.assert_array_equal(y.data, [0.0, 1.0])


def test_hadamard():
    np.testing.assert_array_equal(ag.hadamard(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [3, 8])


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        ag.log(Tensor([1.0, 0.0]))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))


def test_trailing_axis_broadcast_is_refused():
    # (3, 1) against (3, 4) would need general broadcasting
    with pytest.raises(ShapeError):
        Tensor(np.zeros((3, 4))) * Tensor(np.zeros((3, 1)))


def test_leading_axis_and_scalar_broadcast_gradients():
    a = leaf(np.ones((2, 3, 4)))
    b = leaf(np.arange(4.0))
    (a * b + 2.0).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 6.0))
    np.testing.assert_array_equal(a.grad, np.broadcast_to(np.arange(4.0), (2, 3, 4)))


# -- matmul ----------------------------------------------------------------

def test_matmul_values():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ a).data, a.data)
    np.testing.assert_array_equal((a @ Tensor([[5.0], [6.0]])).data, [[17], [39]])


def test_matmul_gradient_is_column_sum_outer_product(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 5)))
    (a @ b).sum().backward()
    # d/da sum(a b) = 1 b^T: every row equals the row sums of b
    np.testing.assert_allclose(a.grad, np.outer(np.ones(3), b.data.sum(axis=1)), atol=1e-12)
    numeric = fd_derivative(lambda x: (x @ b.data).sum(), a.data)
    np.testing.assert_allclose(a.grad, numeric, atol=1e-6)


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


# -- softmax -----------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_array_equal(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ag.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.0900, 0.2447, 0.6652], atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance_and_normalisation(x, c):
    y = ag.softmax(Tensor(x)).data
    np.testing.assert_allclose(ag.softmax(Tensor(x + c)).data, y, atol=1e-12)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all((y >= 0) & (y <= 1))


def test_softmax_no_overflow():
    y = ag.softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(y.data))


# -- conv1d ---------------------------------------------------------------------

def test_conv1d_all_ones_kernel():
    y = ag.conv1d(Tensor([[1.0, 1.0, 1.0, 1.0]]), Tensor(np.ones((1, 1, 3))))
    np.testing.assert_array_equal(y.data, [[2, 3, 3, 2]])


def test_conv1d_identity_kernel(rng):
    x = rng.normal(size=(3, 9))
    k = np.zeros((3, 3, 5))
    k[np.arange(3), np.arange(3), 2] = 1.0
    np.testing.assert_array_equal(ag.conv1d(Tensor(x), Tensor(k)).data, x)


def test_conv1d_matches_direct_loop(rng):
    x, k, b = rng.normal(size=(2, 3, 7)), rng.normal(size=(4, 3, 5)), rng.normal(size=4)
    y = ag.conv1d(Tensor(x), Tensor(k), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2)))
    ref = np.zeros((2, 4, 7))
    for n in range(2):
        for o in range(4):
            for t in range(7):
                ref[n, o, t] = np.sum(xp[n, :, t:t + 5] * k[o]) + b[o]
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_conv1d_kernel_gradient(rng):
    x = Tensor(rng.normal(size=(2, 8)))
    k = leaf(rng.normal(size=(3, 2, 3)))
    w = rng.normal(size=(3, 8))
    assert grad_check(lambda: (ag.conv1d(x, k) * Tensor(w)).sum(), [k]) < 1e-6


def test_conv1d_even_kernel_rejected():
    with pytest.raises(ValueError, match="odd"):
        ag.conv1d(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 1, 4))))


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_examples():
    np.testing.assert_array_equal(ag.layer_norm(Tensor([[2.0], [2.0], [2.0]])).data, 0.0)
    np.testing.assert_allclose(ag.layer_norm(Tensor([[1.0], [3.0]])).data, [[-1.0], [1.0]], atol=1e-5)


def test_layer_norm_statistics_and_gradient(rng):
    x = leaf(rng.normal(size=(2, 5, 6)) * 3 + 1)
    y = ag.layer_norm(x).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-6)
    g, b = leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    w = rng.normal(size=(2, 5, 6))
    assert grad_check(lambda: (ag.layer_norm(x, g, b) * Tensor(w)).sum(), [x, g, b]) < 1e-5


def test_layer_norm_requires_positive_eps():
    with pytest.raises(ValueError):
        ag.layer_norm(Tensor(np.ones((2, 2))), eps=0.0)


# -- cross entropy ----------------------------------------------------------------

def test_cross_entropy_examples():
    t = np.eye(4)[[1, 3]]
    assert ag.cross_entropy(Tensor(t), t).data == 0.0
    np.testing.assert_allclose(ag.cross_entropy(Tensor(np.full((2, 4), 0.25)), t).data, np.log(4), rtol=1e-12)


def test_cross_entropy_mask_and_gradient(rng):
    p = leaf(ag.softmax(Tensor(rng.normal(size=(3, 4)))).data)
    t = np.eye(4)[[0, 2, 1]]
    mask = np.array([True, False, True])
    full = -np.log(p.data[[0, 2], [0, 1]]).mean()
    np.testing.assert_allclose(ag.cross_entropy(p, t, mask).data, full, rtol=1e-12)
    assert grad_check(lambda: ag.cross_entropy(p, t, mask), [p]) < 1e-6


def test_cross_entropy_all_masked():
    with pytest.raises(ValueError, match="masked"):
        ag.cross_entropy(Tensor(np.full((2, 2), 0.5)), np.eye(2), np.zeros(2, dtype=bool))


def test_cross_entropy_clamps_log():
    y = ag.cross_entropy(Tensor([[0.0, 1.0]]), np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(y.data, -np.log(1e-12))


# -- backward ---------------------------------------------------------------------

def test_backward_sum_and_square(rng):
    x = leaf(rng.normal(size=(3, 2)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))
    x.grad = None
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_fan_out_accumulates():
    x = leaf([1.5, -2.0])
    y = ag.scale(x, 3.0)
    (y + y).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_off_path_tensor_has_no_gradient():
    x, unused = leaf([1.0]), leaf([2.0])
    _ = unused * 3.0
    (x * 2.0).sum().backward()
    assert unused.grad is None or not unused.grad.any()


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_determinism(rng):
    data = rng.normal(size=(4, 5))

    def run():
        x = leaf(data)
        y = ag.softmax(ag.layer_norm(x) @ Tensor(data.T))
        (y * y).sum().backward()
        return y.data, x.grad

    (y1, g1), (y2, g2) = run(), run()
    assert np.array_equal(y1, y2) and np.array_equal(g1, g2)


# -- dropout, straight-through, masking ---------------------------------------------

def test_dropout_is_inverted_and_identity_at_eval(rng):
    x = Tensor(np.ones((200, 200)))
    assert ag.dropout(x, 0.2, rng, training=False) is x
    y = ag.dropout(x, 0.2, rng, training=True).data
    assert set(np.unique(y)) <= {0.0, 1.25}
    assert abs(y.mean() - 1.0) < 0.02


def test_straight_through_forwards_hard_and_routes_gradient():
    soft = leaf([0.2, 0.8])
    out = ag.straight_through([0.0, 1.0], soft)
    np.testing.assert_array_equal(out.data, [0.0, 1.0])
    (out * Tensor([3.0, 5.0])).sum().backward()
    np.testing.assert_array_equal(soft.grad, [3.0, 5.0])


def test_mask_fill():
    x = leaf([1.0, 2.0, 3.0])
    y = ag.mask_fill(x, [True, False, True], -7.0)
    np.testing.assert_array_equal(y.data, [1.0, -7.0, 3.0])
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 1.0])


# -- grad_check itself ------------------------------------------------------------------

def test_grad_check_linear(rng):
    x = leaf(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda: (x * w).sum(), [x]) < 1e-10


def test_grad_check_softmax_matmul(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 5)))
    w = Tensor(rng.normal(size=(3, 5)))
    assert grad_check(lambda: (ag.softmax(a @ b) * w).sum(), [a, b]) < 1e-6


def test_grad_check_hard_forward_against_relaxation(rng):
    logits = leaf(rng.normal(size=(4, 6)))
    noise = -np.log(-np.log(rng.random((4, 6))))
    w = Tensor(rng.normal(size=(4, 6)))

    # tau = 1 keeps the relaxation away from saturation, where the true
    # gradients drop below what float64 differences can resolve
    def relaxed():
        return ag.softmax(logits + Tensor(noise), axis=0)

    def hard_forward():
        soft = relaxed()
        hard = ag.one_hot(soft.data.argmax(axis=0), 4, axis=0)
        return (ag.straight_through(hard, soft) * w).sum()

    assert grad_check(hard_forward, [logits], reference=lambda: (relaxed() * w).sum()) < 1e-4


def test_grad_check_detects_wrong_backward(rng, monkeypatch):
    x = leaf(rng.normal(size=5))
    real = ag.sigmoid

    def flipped(t):
        y = real(t)
        bw = y._backward
        y._backward = lambda g: tuple(-v for v in bw(g))
        return y

    monkeypatch.setattr(ag, "sigmoid", flipped)
    assert grad_check(lambda: ag.sigmoid(x).sum(), [x]) > 1.0


def test_every_primitive_within_tolerance():
    from seqpan.gradcheck import primitive_errors

    errors = primitive_errors(np.random.default_rng(7))
    assert len(errors) >= 20
    bad = {k: v for k, v in errors.items() if not v < 1e-4}
    assert not bad
