import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from qwt import tensor_core as tc
from qwt.errors import ShapeError, SingularSystemError


def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(tc.matmul(np.eye(2), a), a)
    assert np.array_equal(tc.matmul(a, np.zeros((2, 2))), np.zeros((2, 2)))
    assert np.array_equal(tc.matmul(a, np.array([[5.0, 6.0], [7.0, 8.0]])), [[19, 22], [43, 50]])


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        tc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_rejects_non_finite():
    with pytest.raises(ShapeError):
        tc.as_matrix(np.array([[1.0, np.nan]]))
    with pytest.raises(ShapeError):
        tc.as_matrix(np.ones(3))


def test_matmul_repeatable_bitwise(rng):
    a, b = rng.standard_normal((30, 40)), rng.standard_normal((40, 20))
    assert np.array_equal(tc.matmul(a, b), tc.matmul(a.copy(), b.copy()))


@given(st.integers(0, 2**32 - 1))
def test_matmul_associative(seed):
    r = np.random.default_rng(seed)
    a, b, c = (r.standard_normal((4, 4)) for _ in range(3))
    lhs = tc.matmul(tc.matmul(a, b), c)
    rhs = tc.matmul(a, tc.matmul(b, c))
    assert np.linalg.norm(lhs - rhs) <= 1e-9 * max(np.linalg.norm(lhs), 1e-300)


def test_spd_solve_examples():
    np.testing.assert_array_equal(tc.spd_solve(np.eye(3), [[1.0], [2.0], [3.0]]), [[1], [2], [3]])
    np.testing.assert_allclose(tc.spd_solve(np.diag([2.0, 4.0]), [[2.0], [8.0]]), [[1], [2]], rtol=1e-15)
    # 2x2 elimination: 4x + 2y = 10, 2x + 3y = 9  ->  y = 2, x = 1.5
    np.testing.assert_allclose(tc.spd_solve([[4.0, 2.0], [2.0, 3.0]], [[10.0], [9.0]]), [[1.5], [2.0]], rtol=1e-14)


@given(st.integers(1, 64), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_spd_solve_residual(n, m, seed):
    r = np.random.default_rng(seed)
    g = r.standard_normal((n, n))
    a = g.T @ g + np.eye(n)
    rhs = r.standard_normal((n, m))
    x = tc.spd_solve(a, rhs)
    assert np.linalg.norm(a @ x - rhs) <= 1e-8 * np.linalg.norm(rhs)


def test_spd_solve_jitter_rescues_semidefinite():
    v = np.array([[1.0], [2.0], [3.0]])
    a = v @ v.T  # rank one
    x = tc.spd_solve(a, v)
    assert np.all(np.isfinite(x))
    np.testing.assert_allclose(a @ x, v, rtol=1e-4)


def test_spd_solve_singular_raises():
    a = np.array([[-1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(SingularSystemError):
        tc.spd_solve(a, np.ones((2, 1)))


def test_spd_solve_shape_errors():
    with pytest.raises(ShapeError):
        tc.spd_solve(np.ones((2, 3)), np.ones((2, 1)))
    with pytest.raises(ShapeError):
        tc.spd_solve(np.eye(2), np.ones((3, 1)))


def test_column_stats_examples():
    m, d = tc.column_stats([[1.0, 1.0], [2.0, 2.0]])
    assert list(m) == [1.0, 2.0] and d == 0.0
    m, d = tc.column_stats([[0.0, 2.0]])
    assert list(m) == [1.0] and d == 2.0
    m, d = tc.column_stats([[-1.0, 1.0], [1.0, -1.0]])
    assert list(m) == [0.0, 0.0] and d == 4.0


def test_column_stats_empty():
    with pytest.raises(ShapeError):
        tc.column_stats(np.zeros((2, 0)))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=st.floats(-1e3, 1e3)))
def test_column_stats_matches_numpy(m):
    means, dev = tc.column_stats(m)
    np.testing.assert_allclose(means, m.mean(axis=1), rtol=1e-12, atol=1e-9)
    assert dev == pytest.approx(float(((m - m.mean(axis=1, keepdims=True)) ** 2).sum()), rel=1e-9, abs=1e-9)


def test_functions_do_not_mutate_inputs(rng):
    a = rng.standard_normal((5, 5))
    a = a @ a.T + np.eye(5)
    rhs = rng.standard_normal((5, 2))
    a0, r0 = a.copy(), rhs.copy()
    tc.spd_solve(a, rhs)
    tc.column_stats(a)
    tc.matmul(a, rhs)
    assert np.array_equal(a, a0) and np.array_equal(rhs, r0)
