import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from upcyclelab.errors import NumericError, ShapeError
from upcyclelab.numerics import (RngStream, bmm, check_finite, cross_entropy, cross_entropy_with_grad,
                                 grad_check, log_softmax_rows, matmul, row_sum, softmax_rows)


def naive_matmul(a, b):
    out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = a.dtype.type(0)
            for p in range(a.shape[1]):
                acc = a.dtype.type(acc + a[i, p] * b[p, j])
            out[i, j] = acc
    return out


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_matmul_matches_scalar_loop_bit_for_bit(dtype):
    g = np.random.default_rng(0)
    a = g.standard_normal((7, 13)).astype(dtype)
    b = g.standard_normal((13, 5)).astype(dtype)
    out = matmul(a, b)
    assert out.dtype == dtype
    assert out.tobytes() == naive_matmul(a, b).tobytes()


def test_matmul_close_to_numpy_and_checks_shapes():
    g = np.random.default_rng(1)
    a, b = g.standard_normal((40, 30)), g.standard_normal((30, 20))
    np.testing.assert_allclose(matmul(a, b), a @ b, rtol=1e-12, atol=1e-12)
    with pytest.raises(ShapeError):
        matmul(a, a)
    with pytest.raises(ShapeError):
        matmul(a[0], b)


def test_matmul_integer_inputs_promote_to_float64():
    out = matmul(np.ones((2, 3), dtype=np.int64), np.ones((3, 2), dtype=np.int64))
    assert out.dtype == np.float64 and (out == 3).all()


def test_bmm_equals_stacked_matmul():
    g = np.random.default_rng(2)
    a = g.standard_normal((4, 6, 5)).astype(np.float32)
    b = g.standard_normal((4, 5, 3)).astype(np.float32)
    out = bmm(a, b)
    for s in range(4):
        assert out[s].tobytes() == matmul(a[s], b[s]).tobytes()
    with pytest.raises(ShapeError):
        bmm(a, a)


def test_row_sum_keeps_dtype_and_order():
    x = np.array([[1e8, 1.0, -1e8]], dtype=np.float32)
    s = row_sum(x)
    assert s.dtype == np.float32
    # left-to-right: (1e8 + 1) rounds to 1e8 in float32, then cancels
    assert s[0] == np.float32(0.0)
    assert row_sum(np.zeros((3, 0)))[0] == 0


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
                     elements=st.floats(-50, 50, allow_nan=False))


@given(finite_rows)
def test_softmax_rows_are_distributions(x):
    p = softmax_rows(x)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@given(finite_rows, st.floats(-100, 100))
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(softmax_rows(x), softmax_rows(x + c), atol=1e-10)


@given(finite_rows)
def test_log_softmax_consistent_with_softmax(x):
    np.testing.assert_allclose(np.exp(log_softmax_rows(x)), softmax_rows(x), atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        softmax_rows(np.array([[0.0, np.nan]]))
    with pytest.raises(NumericError):
        check_finite(np.array([np.inf]))


def test_cross_entropy_uniform_is_log_vocab():
    assert math.isclose(cross_entropy(np.zeros((5, 256)), np.arange(5)), math.log(256), rel_tol=1e-12)


def test_cross_entropy_gradient_matches_finite_differences():
    g = np.random.default_rng(3)
    logits = g.standard_normal((6, 11))
    targets = g.integers(0, 11, 6)
    _, grad = cross_entropy_with_grad(logits, targets)
    assert grad_check(lambda z: cross_entropy(z, targets), logits, grad) < 1e-6


def test_cross_entropy_errors():
    with pytest.raises(IndexError):
        cross_entropy(np.zeros((2, 4)), [0, 4])
    with pytest.raises(ShapeError):
        cross_entropy(np.zeros((2, 4)), [0])


def test_rng_streams_are_pure_and_split_by_key():
    a = RngStream(5)
    assert (a.normal((10,)) == RngStream(5).normal((10,))).all()
    assert not (a.split("x").normal((10,)) == a.split("y").normal((10,))).all()
    assert not (a.normal((10,)) == a.advance().normal((10,))).all()
    # the counter is part of the split key
    assert not (a.split("x").normal((10,)) == a.advance().split("x").normal((10,))).all()


def test_truncated_normal_respects_bound():
    x = RngStream(0).truncated_normal((20000,), std=0.5, dtype=np.float64, bound=2.0)
    assert np.abs(x).max() <= 1.0
    assert abs(x.std() - 0.5 * 0.8796) < 0.01  # std of a normal truncated at two sigma


def test_grad_check_requires_float64_and_flags_wrong_gradients():
    x = np.array([1.0, 2.0, 3.0])
    assert grad_check(lambda v: float((v ** 2).sum()), x, 2 * x) < 1e-8
    assert grad_check(lambda v: float((v ** 2).sum()), x, 3 * x) > 0.1
    assert (x == [1.0, 2.0, 3.0]).all()  # restored after perturbation
    with pytest.raises(NumericError):
        grad_check(lambda v: 0.0, x.astype(np.float32), x)
