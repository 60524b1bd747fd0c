import numpy as np
import pytest

from dclstm import autodiff as ad
from dclstm.autodiff import Tape, Variable, backward, finite_diff_grad


def test_sum_gradient_is_ones():
    x = Variable(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(x)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_square_gradient():
    x = Variable(np.array([2.0, -3.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(x * x)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [4, -6])


def test_sigmoid_gradient_at_zero():
    x = Variable(np.array([0.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.mean(ad.sigmoid(x))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, [0.25])


def test_relu_subgradient_at_zero_is_zero():
    x = Variable(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.relu(x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_non_scalar_loss_rejected():
    x = Variable(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.GraphError):
        backward(tape, y)


def test_detached_loss_rejected():
    x = Variable(np.ones(3), requires_grad=True)
    with Tape():
        loss = ad.sum_all(x)
    with pytest.raises(ad.GraphError):
        backward(Tape(), loss)
    # computed outside any tape
    with pytest.raises(ad.GraphError):
        backward(Tape(), ad.sum_all(x))


def test_tape_is_topological_and_ids_unique():
    x = Variable(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        y = ad.tanh(x) * x + ad.sigmoid(x)
        loss = ad.mean(y)
    ids = [n.output.node_id for n in tape.nodes]
    assert ids == list(range(len(tape.nodes)))
    for n in tape.nodes:
        for inp in n.inputs:
            assert inp.node_id is None or inp.node_id < n.output.node_id
    backward(tape, loss)


def test_gradient_accumulates_over_two_consumers():
    rng = np.random.default_rng(0)
    xv = rng.normal(size=5)

    def grad_of(build):
        x = Variable(xv, requires_grad=True)
        with Tape() as tape:
            loss = build(x)
        backward(tape, loss)
        return x.grad

    first = lambda x: ad.sum_all(ad.tanh(x))  # noqa: E731
    second = lambda x: ad.sum_all(x * x)  # noqa: E731
    both = grad_of(lambda x: first(x) + second(x))
    np.testing.assert_allclose(both, grad_of(first) + grad_of(second), rtol=1e-12)


def test_untracked_without_tape():
    x = Variable(np.ones(2), requires_grad=True)
    y = ad.sum_all(x)
    assert y.node_id is None and not y.requires_grad


def test_broadcast_gradients_reduce_to_input_shape():
    a = Variable(np.ones((2, 3, 4)), requires_grad=True)
    b = Variable(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(a * b + b)
    backward(tape, loss)
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(b.grad, np.full(4, 12.0))
    np.testing.assert_allclose(a.grad, np.broadcast_to(np.arange(4.0), (2, 3, 4)))


def test_shape_ops_gradients():
    x = Variable(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
    w = np.random.default_rng(1).normal(size=(3, 4))
    with Tape() as tape:
        parts = [x[0], x[1][..., :2], ad.reshape(x[1], (12,))]
        loss = (ad.sum_all(parts[0] * w) + ad.sum_all(ad.concat([parts[1], parts[1]], -1))
                + ad.sum_all(ad.stack([parts[2], parts[2]])))
    backward(tape, loss)
    expected = np.zeros((2, 3, 4))
    expected[0] = w
    expected[1] = 2.0
    expected[1][:, :2] += 2.0
    np.testing.assert_allclose(x.grad, expected)


def test_finite_diff_examples():
    g = finite_diff_grad(lambda v: np.sum(v ** 2), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [2, 4], atol=1e-8)
    np.testing.assert_array_equal(finite_diff_grad(lambda v: 3.0, np.ones((2, 2))), np.zeros((2, 2)))


def test_relative_error_definition():
    assert ad.relative_error([1.0], [1.0]) == 0
    assert ad.relative_error([1.0], [3.0]) == pytest.approx(0.5)
    assert ad.relative_error([0.0], [0.0]) == 0
    assert ad.relative_error([0.0], [1e-9]) == pytest.approx(1e-9 / 1e-8)
