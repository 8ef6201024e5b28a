import numpy as np
import pytest

from metafew.autodiff import ShapeError, Tape, backward, backward_from
from metafew.gradcheck import max_rel_error, primitive_checks


def test_leaf_rejects_nonfinite():
    tape = Tape()
    with pytest.raises(ValueError):
        tape.leaf(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        tape.leaf(np.array([np.inf]))


def test_softmax_of_zeros_is_uniform():
    tape = Tape()
    for n in (2, 3, 5, 8):
        y = tape.softmax(tape.const(np.zeros((1, n))))
        np.testing.assert_allclose(y.value, np.full((1, n), 1.0 / n))


def test_cross_entropy_of_onehot_correct_is_zero():
    # logits = log of a (near) one-hot distribution on the correct class
    tape = Tape()
    probs = np.array([[1.0 - 2e-12, 1e-12, 1e-12]])
    logits = tape.const(np.log(probs))
    loss = tape.cross_entropy(logits, np.array([0]))
    assert abs(float(loss.value)) < 1e-9


def test_backward_sum_gives_ones():
    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0, 3.0]))
    s = tape.reshape(tape.sum_over_axis(tape.reshape(x, (1, 3)), 1), ())
    grads = backward(tape, s)
    np.testing.assert_array_equal(grads[x], np.ones(3))


def test_backward_dot_product():
    tape = Tape()
    xv = np.array([1.0, -2.0, 0.5])
    yv = np.array([3.0, 0.25, -1.0])
    x = tape.leaf(xv)
    y = tape.leaf(yv)
    prod = tape.matmul(tape.reshape(x, (1, 3)), tape.reshape(y, (3, 1)))
    loss = tape.reshape(prod, ())
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[x], yv)
    np.testing.assert_allclose(grads[y], xv)


def test_backward_requires_scalar_loss():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    y = tape.scale(x, 2.0)
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_unreached_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    unused = tape.leaf(np.ones(4))
    loss = tape.reshape(tape.sum_over_axis(tape.reshape(x, (1, 3)), 1), ())
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[unused], np.zeros(4))


def test_shape_mismatch_names_operation():
    tape = Tape()
    a = tape.const(np.ones((2, 3)))
    b = tape.const(np.ones((2, 3)))
    with pytest.raises(ShapeError, match="matmul"):
        tape.matmul(a, b)


def test_every_primitive_matches_finite_differences():
    for name, build, params in primitive_checks(seed=0):
        err = max_rel_error(build, params)
        assert err < 1e-4, f"{name}: max relative error {err}"


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    dims = [4, 6, 5, 3]
    params = {}
    for i in range(3):
        params[f"w{i}"] = 0.7 * rng.standard_normal((dims[i], dims[i + 1]))
        params[f"b{i}"] = 0.2 * rng.standard_normal(dims[i + 1])
    x = rng.standard_normal((4, 4))
    labels = np.array([0, 2, 1, 1])

    def build(tape, nodes):
        h = tape.const(x)
        for i in range(3):
            h = tape.affine(h, nodes[f"w{i}"], nodes[f"b{i}"])
            if i < 2:
                h = tape.tanh(h)
        return tape.cross_entropy(h, labels)

    assert max_rel_error(build, params) < 1e-4


def test_backward_linearity():
    # grad(a*f + b*g) == a*grad(f) + b*grad(g) on shared leaves
    rng = np.random.default_rng(11)
    xv = rng.standard_normal((3, 3))
    a_coef, b_coef = 1.7, -0.4

    def losses(tape, x):
        f = tape.reshape(tape.sum_over_axis(tape.reshape(tape.tanh(x), (1, -1)), 1), ())
        g = tape.cross_entropy(tape.matmul(x, tape.const(np.eye(3))), np.array([0, 1, 2]))
        return f, g

    tape = Tape()
    x = tape.leaf(xv)
    f, g = losses(tape, x)
    combo = tape.add(tape.scale(f, a_coef), tape.scale(g, b_coef))
    g_combo = backward(tape, tape.reshape(combo, ()))[x]

    tape_f = Tape()
    xf = tape_f.leaf(xv)
    ff, _ = losses(tape_f, xf)
    gf = backward(tape_f, ff)[xf]
    tape_g = Tape()
    xg = tape_g.leaf(xv)
    _, gg = losses(tape_g, xg)
    ggrad = backward(tape_g, gg)[xg]

    np.testing.assert_allclose(g_combo, a_coef * gf + b_coef * ggrad, atol=1e-10)


def test_forward_and_backward_are_deterministic():
    def run():
        tape = Tape()
        rng = np.random.default_rng(5)
        x = tape.leaf(rng.standard_normal((4, 6)))
        w = tape.leaf(rng.standard_normal((6, 3)))
        h = tape.gelu(tape.matmul(x, w))
        loss = tape.cross_entropy(h, np.array([0, 1, 2, 0]))
        grads = backward(tape, loss)
        return float(loss.value), grads[x].copy(), grads[w].copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_backward_from_accepts_tensor_seeds():
    tape = Tape()
    x = tape.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
    y = tape.scale(x, 3.0)
    seed = np.array([[1.0, 0.0], [0.0, 2.0]])
    grads = backward_from(tape, [(y, seed)])
    np.testing.assert_allclose(grads[x], 3.0 * seed)


def test_reused_node_accumulates_gradient():
    tape = Tape()
    x = tape.leaf(np.array([2.0]))
    y = tape.mul(x, x)  # x^2, dy/dx = 2x = 4
    loss = tape.reshape(y, ())
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[x], [4.0])
