import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dclstm import tensor as T
from oracles import matmul_loops


def test_zeros():
    np.testing.assert_array_equal(T.zeros([2, 2]), [[0, 0], [0, 0]])
    np.testing.assert_array_equal(T.zeros([1]), [0])
    assert T.zeros([3, 1, 2]).size == 6
    assert T.zeros([2]).dtype == np.float32


@pytest.mark.parametrize("shape", [[], [0, 3], [2, -1]])
def test_invalid_shapes(shape):
    with pytest.raises(T.ShapeError):
        T.zeros(shape)


def test_overflowing_shape():
    with pytest.raises(OverflowError):
        T.validate_shape([2**40, 2**40])


def test_elementwise():
    np.testing.assert_array_equal(T.elementwise("add", [1, 2], [3, 4]), [4, 6])
    np.testing.assert_array_equal(T.elementwise("mul", [2, 3], [0, 1]), [0, 3])
    np.testing.assert_array_equal(T.elementwise("max", [-1, 5], [0, 0]), [0, 5])
    with pytest.raises(T.ShapeError):
        T.elementwise("add", [1, 2], [1, 2, 3])


def test_map():
    assert T.map("sigmoid", np.array([0.0]))[0] == 0.5
    assert T.map("tanh", np.array([0.0]))[0] == 0.0
    np.testing.assert_array_equal(T.map("relu", np.array([-2.0, 3.0])), [0, 3])
    np.testing.assert_array_equal(T.map("scale", np.array([1.0, -2.0]), k=3), [3, -6])


def test_sigmoid_extremes_stay_finite():
    out = T.sigmoid(np.array([-1000.0, 1000.0]))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_reduce_mean():
    a = np.array([[1.0, 3.0], [5.0, 7.0]])
    assert T.reduce_mean(a, [0, 1]) == 4
    np.testing.assert_array_equal(T.reduce_mean(a, [1]), [2, 6])
    assert np.all(T.reduce_mean(np.full((3, 4, 5), 2.5), [0, 2]) == 2.5)
    with pytest.raises(T.ShapeError):
        T.reduce_mean(a, [2])
    with pytest.raises(T.ShapeError):
        T.reduce_mean(a, [0, 0])


def test_matmul():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(np.eye(2), m), m)
    np.testing.assert_array_equal(T.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])), [[11]])
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.matmul(a, b), matmul_loops(a, b), rtol=1e-5)
    with pytest.raises(T.ShapeError):
        T.matmul(a, a)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_surfaced():
    with pytest.raises(T.NonFiniteError):
        T.elementwise("mul", np.array([np.inf]), np.array([0.0]))


shapes = st.lists(st.integers(1, 5), min_size=1, max_size=4)


@given(shapes, st.data())
def test_flat_index_round_trip(shape, data):
    coord = tuple(data.draw(st.integers(0, d - 1)) for d in shape)
    flat = T.flat_index(coord, shape)
    assert flat == np.ravel_multi_index(coord, shape)
    assert T.unflatten_index(flat, shape) == coord
    assert T.strides(shape)[-1] == 1


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_add_mul_commutative_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.uniform(-10, 10, (3, 7))
    for op in ("add", "mul"):
        ab = T.elementwise(op, a, b)
        np.testing.assert_allclose(ab, T.elementwise(op, b, a), atol=1e-6)
        left = T.elementwise(op, ab, c)
        right = T.elementwise(op, a, T.elementwise(op, b, c))
        np.testing.assert_allclose(left, right, atol=1e-6 * max(1, np.abs(left).max()))


@given(shapes, st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_mean_over_all_axes_is_sum_over_count(shape, seed):
    a = np.random.default_rng(seed).uniform(-10, 10, shape)
    np.testing.assert_allclose(T.reduce_mean(a), a.sum() / a.size, rtol=1e-6, atol=1e-12)


@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_matmul_matches_loops(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    np.testing.assert_allclose(T.matmul(a, b), matmul_loops(a, b), rtol=1e-5, atol=1e-9)
