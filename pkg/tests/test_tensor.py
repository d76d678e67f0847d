import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from est.errors import DimensionError
from est.tensor import matmul


def test_identity():
    np.testing.assert_array_equal(matmul(np.eye(2), [[3, 4], [5, 6]]), [[3, 4], [5, 6]])


def test_zero():
    np.testing.assert_array_equal(matmul([[1, 2]], [[0], [0]]), [[0]])


def test_hand_arithmetic():
    # 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_left_to_right_order():
    # (1e16 + 1) - 1e16 == 0 in float64, but 1e16 + (1 - 1e16) == 0 too; pick a case
    # where the order shows: ((1e16 + -1e16) + 1) = 1
    a = np.array([[1e16, -1e16, 1.0]])
    b = np.ones((3, 1))
    assert matmul(a, b)[0, 0] == 1.0


def test_batch_independent_of_stacking(rng):
    a = rng.standard_normal((5, 3, 7))
    b = rng.standard_normal((7, 2))
    stacked = matmul(a, b)
    for i in range(5):
        np.testing.assert_array_equal(stacked[i], matmul(a[i], b))


small = st.integers(1, 4)


@given(st.data())
def test_associativity(data):
    n, k, m, p = (data.draw(small) for _ in range(4))
    el = st.floats(-10, 10, allow_nan=False)
    a = data.draw(arrays(np.float64, (n, k), elements=el))
    b = data.draw(arrays(np.float64, (k, m), elements=el))
    c = data.draw(arrays(np.float64, (m, p), elements=el))
    np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-9, rtol=1e-9)


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
       arrays(np.float64, (4, 2), elements=st.floats(-5, 5)))
def test_matches_numpy(a, b):
    np.testing.assert_allclose(matmul(a, b), a @ b, atol=1e-12)
