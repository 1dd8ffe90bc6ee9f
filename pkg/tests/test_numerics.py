import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conceptgcd.errors import DimensionError, NumericError, ParameterError
from conceptgcd.numerics import (
    RngState,
    finite_diff_check,
    l2_normalize_backward,
    l2_normalize_rows,
    matmul,
    relu,
    relu_backward,
    softmax_rows,
)

from conftest import brute_matmul


def test_matmul_identity(rng):
    m = rng.normal((3, 5))
    assert np.array_equal(matmul(np.eye(3), m), m)


def test_matmul_dot_product():
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))[0, 0] == 11.0


def test_matmul_against_triple_loop(rng):
    a, b = rng.normal((5, 4)), rng.normal((4, 3))
    np.testing.assert_allclose(matmul(a, b), brute_matmul(a, b), rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**32))
def test_matmul_random_shapes(r, k, c, seed):
    g = RngState(seed)
    a, b = g.normal((r, k)), g.normal((k, c))
    np.testing.assert_allclose(matmul(a, b), brute_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_relu_and_backward():
    assert relu(np.array([[-1.0, 0.0, 2.0]])).tolist() == [[0.0, 0.0, 2.0]]
    out = relu_backward(np.array([[-1.0, 2.0]]), np.array([[5.0, 7.0]]))
    assert out.tolist() == [[0.0, 7.0]]


def test_relu_gradient_finite_difference(rng):
    x = rng.normal((4, 5))
    x[np.abs(x) < 1e-3] = 0.5
    w = rng.normal((4, 5))

    def fn(p):
        return float(np.sum(w * relu(p[0]))), [relu_backward(p[0], w)]

    assert finite_diff_check(fn, [x]) < 1e-6


def test_softmax_known_values():
    np.testing.assert_allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax_rows(np.array([[math.log(3), 0.0]])), [[0.75, 0.25]], atol=1e-15)


def test_softmax_rejects_bad_temperature():
    with pytest.raises(ParameterError):
        softmax_rows(np.zeros((1, 2)), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.01, 10.0), st.floats(-50, 50))
def test_softmax_stochastic_and_shift_invariant(seed, temp, shift):
    x = RngState(seed).normal((4, 6), 5.0)
    p = softmax_rows(x, temp)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax_rows(x + shift, temp), p, atol=1e-12)


def test_l2_normalize():
    out, flags = l2_normalize_rows(np.array([[3.0, 4.0], [0.0, 0.0]]))
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0]])
    assert flags.tolist() == [False, True]


def test_l2_normalize_unit_rows(rng):
    out, flags = l2_normalize_rows(rng.normal((10, 7)))
    assert not flags.any()
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-14)


def test_l2_normalize_backward_fd(rng):
    x, w = rng.normal((3, 4)), rng.normal((3, 4))

    def fn(p):
        return float(np.sum(w * l2_normalize_rows(p[0])[0])), [l2_normalize_backward(p[0], w)]

    assert finite_diff_check(fn, [x]) < 1e-7


def test_finite_diff_quadratic():
    def fn(p):
        return float(p[0][0, 0] ** 2), [2 * p[0]]

    assert finite_diff_check(fn, [np.array([[3.0]])]) < 1e-8


def test_finite_diff_catches_wrong_gradient():
    def fn(p):
        return float(p[0][0, 0] ** 2), [4 * p[0]]

    # analytic 12 vs numeric 6: |12 - 6| / 6
    assert finite_diff_check(fn, [np.array([[3.0]])]) == pytest.approx(1.0, abs=1e-6)


def test_finite_diff_nonfinite_loss():
    with pytest.raises(NumericError):
        finite_diff_check(lambda p: (float("nan"), [p[0]]), [np.zeros((1, 1))])


def test_finite_diff_leaves_inputs_untouched():
    x = np.array([[1.0, 2.0]])
    finite_diff_check(lambda p: (float(np.sum(p[0] ** 2)), [2 * p[0]]), [x])
    assert x.tolist() == [[1.0, 2.0]]


def test_rng_repeatable_in_process():
    a, b = RngState(42), RngState(42)
    assert np.array_equal(a.normal((5, 5)), b.normal((5, 5)))
    assert np.array_equal(a.random_raw(8), b.random_raw(8))


def test_rng_children_are_independent_and_stable():
    root = RngState(5)
    c1, c2 = root.child(1), root.child(2)
    assert not np.array_equal(c1.random_raw(4), c2.random_raw(4))
    assert np.array_equal(RngState(5).child(1).random_raw(4), RngState(5).child(1).random_raw(4))


def test_rng_byte_identical_across_processes():
    code = "from conceptgcd.numerics import RngState; import sys; sys.stdout.write(RngState(99).normal((4,4)).tobytes().hex())"
    outs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)]
    assert outs[0] == outs[1]
    assert outs[0] == RngState(99).normal((4, 4)).tobytes().hex()


def test_rng_rejects_bad_seed():
    with pytest.raises(ParameterError):
        RngState(-1)
