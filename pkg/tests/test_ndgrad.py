import numpy as np
import pytest

from tbgc import ndgrad as nd


def grads_of(fn, **values):
    tape = nd.Tape()
    leaves = {k: tape.leaf(k, v) for k, v in values.items()}
    return nd.backward(fn(**leaves), tape)


def fd_check(fn, rel=1e-6, **values):
    """Compare backward() against central differences for every leaf."""
    got = grads_of(fn, **values)
    for name, x0 in values.items():
        def f(x, name=name):
            env = {k: (x if k == name else v) for k, v in values.items()}
            return fn(**{k: nd.Tensor(v) for k, v in env.items()}).item()
        want = nd.finite_diff_grad(f, x0)
        np.testing.assert_allclose(got[name], want, rtol=rel, atol=1e-8)


# ---------------------------------------------------------------- forward


def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nd.matmul(a, np.eye(2)).numpy(), a)
    np.testing.assert_array_equal(nd.matmul([[1.0, 2.0]], [[3.0], [4.0]]).numpy(), [[11.0]])
    np.testing.assert_array_equal(nd.matmul(np.zeros((2, 3)), np.ones((3, 2))).numpy(), np.zeros((2, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(nd.ShapeMismatch):
        nd.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_relu_forward_and_subgradient():
    np.testing.assert_array_equal(nd.relu(np.array([-1.0, 0.0, 2.0])).numpy(), [0.0, 0.0, 2.0])
    g = grads_of(lambda x: nd.sum(nd.relu(x)), x=np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(g["x"], [0.0, 1.0])
    g0 = grads_of(lambda x: nd.sum(nd.relu(x)), x=np.array([0.0]))
    np.testing.assert_array_equal(g0["x"], [0.0])


def test_softmax_ce_examples():
    assert nd.softmax_cross_entropy(np.zeros((1, 2)), np.array([0])).item() == pytest.approx(np.log(2))
    assert nd.softmax_cross_entropy(np.array([[100.0, 0.0]]), np.array([0])).item() == pytest.approx(0.0, abs=1e-40)
    g = grads_of(lambda z: nd.softmax_cross_entropy(z, np.array([0])), z=np.zeros((1, 2)))
    np.testing.assert_allclose(g["z"], [[-0.5, 0.5]], atol=1e-15)


def test_softmax_ce_rejects_bad_targets():
    with pytest.raises(nd.IndexOutOfRange):
        nd.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(nd.ShapeMismatch):
        nd.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 1, 2]))


def test_soft_target_equals_one_hot_index_target(rng):
    z = rng.normal(size=(4, 5))
    y = np.array([0, 4, 2, 2])
    a = nd.softmax_cross_entropy(z, y).item()
    b = nd.softmax_cross_entropy(z, nd.one_hot(y, 5)).item()
    assert a == b


def test_smooth_l1_regions():
    # |d| = 2 > beta = 1: linear region, 2 - 0.5
    assert nd.smooth_l1(np.full(4, 2.0), np.zeros(4), beta=1.0).item() == pytest.approx(1.5)
    # |d| = 0.5 < beta: 0.5 d^2 / beta
    assert nd.smooth_l1(np.array([0.5]), np.array([0.0]), beta=1.0).item() == pytest.approx(0.125)
    assert nd.smooth_l1(np.ones(3), np.ones(3)).item() == 0.0


# -------------------------------------------------------------- backward


def test_linear_and_quadratic_functionals():
    np.testing.assert_array_equal(grads_of(lambda x: nd.sum(x), x=np.array([5.0, 7.0]))["x"], [1.0, 1.0])
    np.testing.assert_array_equal(grads_of(lambda x: nd.dot(x, x), x=np.array([1.0, 2.0]))["x"], [2.0, 4.0])


def test_composite_matches_finite_differences(rng):
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=(2, 3))
    assert np.abs(x @ w).min() > 1e-3  # central differences need distance from the relu kink
    fd_check(lambda x, w: nd.softmax_cross_entropy(nd.relu(nd.matmul(x, w)), np.array([1, 3])), x=x, w=w)


@pytest.mark.parametrize("op", [
    lambda x: nd.sum(nd.sigmoid(x)),
    lambda x: nd.sum(nd.sqrt(nd.add(nd.mul(x, x), 1.0))),
    lambda x: nd.sum(nd.mul(nd.l2_normalize(x), np.arange(6.0).reshape(2, 3))),
    lambda x: nd.sum(nd.mul(nd.transpose(x), np.arange(6.0).reshape(3, 2))),
    lambda x: nd.sum(nd.mul(nd.reshape(x, (3, 2)), np.arange(6.0).reshape(3, 2))),
    lambda x: nd.sum(nd.mul(nd.concat([x, nd.scale(x, 2.0)], axis=0), np.arange(12.0).reshape(4, 3))),
    lambda x: nd.mean(nd.mul(nd.clamp(x, -0.5, 0.5), x)),
    lambda x: nd.smooth_l1(x, np.zeros((2, 3)), beta=0.7),
    lambda x: nd.sum(nd.mul(nd.add(x, np.array([1.0, -2.0, 3.0])), x)),
])
def test_op_vjps_match_finite_differences(op, rng):
    x = rng.normal(size=(2, 3))
    x[np.abs(np.abs(x) - 0.5) < 1e-2] += 0.05  # away from clamp corners
    x[np.abs(np.abs(x) - 0.7) < 1e-2] += 0.05  # and smooth-L1 transition
    fd_check(op, x=x)


def test_gradient_accumulates_over_reuse():
    g = grads_of(lambda x: nd.sum(nd.add(nd.scale(x, 3.0), nd.mul(x, x))), x=np.array([1.0, -2.0]))
    np.testing.assert_allclose(g["x"], [5.0, -1.0])


def test_unreached_leaf_gets_zero_gradient():
    tape = nd.Tape()
    x = tape.leaf("x", np.array([1.0, 2.0]))
    tape.leaf("unused", np.ones((2, 2)))
    g = nd.backward(nd.sum(x), tape)
    np.testing.assert_array_equal(g["unused"], np.zeros((2, 2)))


def test_constant_leaf_excluded():
    tape = nd.Tape()
    x = tape.leaf("x", np.array([1.0]))
    c = tape.leaf("c", np.array([2.0]), requires_grad=False)
    g = nd.backward(nd.sum(nd.mul(x, c)), tape)
    assert set(g) == {"x"}


def test_backward_errors_and_release():
    tape = nd.Tape()
    x = tape.leaf("x", np.ones(3))
    y = nd.scale(x, 2.0)
    with pytest.raises(nd.NonScalarLoss):
        nd.backward(y, tape)
    assert tape.released  # released even on failure
    with pytest.raises(nd.TapeReleased):
        nd.backward(nd.Tensor(1.0), tape)
    with pytest.raises(nd.TapeReleased):
        tape.leaf("z", 1.0)
    empty = nd.Tape()
    with pytest.raises(nd.EmptyTape):
        nd.backward(empty.leaf("a", np.array(1.0)), empty)


def test_tape_mixing_rejected():
    a, b = nd.Tape(), nd.Tape()
    with pytest.raises(nd.NDGradError):
        nd.add(a.leaf("x", 1.0), b.leaf("y", 1.0))


def test_tensor_data_is_read_only():
    t = nd.Tensor(np.ones(2))
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_activation_counter_tracks_live_records():
    base = nd.ACTIVATIONS.live
    tape = nd.Tape()
    x = tape.leaf("x", np.ones(3))
    loss = nd.sum(nd.relu(nd.scale(x, 2.0)))
    assert nd.ACTIVATIONS.live == base + len(tape) == base + 3
    nd.backward(loss, tape)
    assert nd.ACTIVATIONS.live == base


# --------------------------------------------------------------- fd helper


def test_finite_diff_examples():
    assert nd.finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]))[0] == pytest.approx(6.0, rel=1e-9)
    np.testing.assert_array_equal(nd.finite_diff_grad(lambda x: 4.2, np.ones(3)), np.zeros(3))
    np.testing.assert_allclose(nd.finite_diff_grad(lambda x: float(x.sum()), np.arange(4.0)), np.ones(4), rtol=1e-9)
    with pytest.raises(ValueError):
        nd.finite_diff_grad(lambda x: 0.0, np.ones(1), h=0.0)
