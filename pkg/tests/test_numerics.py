import math

import numpy as np
import pytest

from bicrcl.errors import InvalidInputError, InvalidParameterError, SingularityError
from bicrcl.numerics import softmax_temp, solve_ridge, sym_kl


def test_solve_ridge_identity():
    assert np.array_equal(solve_ridge(np.eye(3), np.eye(3), 0.0), np.eye(3))


def test_solve_ridge_scalar():
    assert solve_ridge([[0.0]], [[4.0]], 2.0)[0, 0] == pytest.approx(2.0, abs=1e-15)


def test_solve_ridge_matches_inverse():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(8, 8))
    gram = a @ a.T
    cross = rng.normal(size=(8, 3))
    expected = np.linalg.inv(gram + 0.1 * np.eye(8)) @ cross
    assert np.max(np.abs(solve_ridge(gram, cross, 0.1) - expected)) < 1e-9


def test_solve_ridge_invariant_to_row_permutation():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(30, 6))
    y = rng.normal(size=(30, 2))
    order = rng.permutation(30)
    first = solve_ridge(h.T @ h, h.T @ y, 0.5)
    second = solve_ridge(h[order].T @ h[order], h[order].T @ y[order], 0.5)
    assert np.max(np.abs(first - second)) < 1e-9


def test_solve_ridge_singular_names_pivot():
    with pytest.raises(SingularityError) as info:
        solve_ridge(np.diag([1.0, 0.0, 1.0]), np.ones((3, 1)), 0.0)
    assert info.value.pivot == 2


def test_solve_ridge_rejects_nan_and_negative_beta():
    with pytest.raises(InvalidInputError):
        solve_ridge([[np.nan]], [[1.0]], 1.0)
    with pytest.raises(InvalidParameterError):
        solve_ridge(np.eye(2), np.ones((2, 1)), -1.0)


def test_softmax_examples():
    assert np.allclose(softmax_temp([2.0, 2.0, 2.0], 0.3), [1 / 3] * 3, atol=1e-15)
    assert np.allclose(softmax_temp([0.0, math.log(2.0)], 1.0), [1 / 3, 2 / 3], atol=1e-15)
    # exact: 1 / (1 + e^-10)
    probs = softmax_temp([1.0, 0.0], 0.1)
    assert probs[0] == pytest.approx(1.0 / (1.0 + math.exp(-10.0)), rel=1e-14)


def test_softmax_rejects_nonpositive_tau():
    for tau in (0.0, -1.0):
        with pytest.raises(InvalidParameterError):
            softmax_temp([1.0, 2.0], tau)


def test_softmax_shift_invariant():
    z = np.array([0.3, -1.2, 2.5])
    assert np.allclose(softmax_temp(z, 0.1), softmax_temp(z + 7.0, 0.1), atol=1e-12)


def test_sym_kl_examples():
    assert sym_kl([0.2, 0.8], [0.2, 0.8]) == 0.0
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    expected = 0.5 * (np.sum(p * np.log(p / q)) + np.sum(q * np.log(q / p)))
    assert sym_kl(p, q) == pytest.approx(expected, rel=1e-12)
    clamped = sym_kl([1.0, 0.0], [0.5, 0.5])
    assert math.isfinite(clamped) and clamped > 0


def test_sym_kl_length_mismatch():
    with pytest.raises(InvalidInputError):
        sym_kl([0.5, 0.5], [1.0, 0.0, 0.0])


@pytest.mark.parametrize("seed", range(100))
def test_sym_kl_symmetric_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(2, 7))
    p = rng.random(size) + 1e-3
    q = rng.random(size) + 1e-3
    p, q = p / p.sum(), q / q.sum()
    assert sym_kl(p, q) == sym_kl(q, p)
    assert sym_kl(p, q) >= 0.0
