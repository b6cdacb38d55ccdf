"""Gauss-Hermite grid moments and degenerate covariances."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctdc.quadrature import gauss_hermite_2d


def covariance(s11, s22, rho):
    s12 = rho * np.sqrt(s11 * s22)
    return np.array([[s11, s12], [s12, s22]])


def test_weights_sum_to_one():
    grid = gauss_hermite_2d(covariance(2.18, 0.11, -0.25), 21)
    assert grid.weights.sum() == pytest.approx(1.0, abs=1e-13)
    assert (grid.weights > 0).all()
    assert grid.nodes.shape == (441, 2)


@settings(max_examples=25, deadline=None)
@given(
    s11=st.floats(0.05, 8.0),
    s22=st.floats(0.05, 8.0),
    rho=st.floats(-0.9, 0.9),
    n=st.integers(5, 31),
)
def test_grid_reproduces_first_and_second_moments(s11, s22, rho, n):
    sigma = covariance(s11, s22, rho)
    grid = gauss_hermite_2d(sigma, n)
    mean = grid.weights @ grid.nodes
    np.testing.assert_allclose(mean, [0.0, 0.0], atol=1e-9)
    second = (grid.nodes * grid.weights[:, None]).T @ grid.nodes
    np.testing.assert_allclose(second, sigma, rtol=1e-10, atol=1e-12)


def test_fourth_moment_matches_gaussian():
    # E[x^4] = 3 sigma^2 for a centered normal; needs >= 3 points
    grid = gauss_hermite_2d(covariance(1.7, 0.4, 0.3), 9)
    m4 = grid.weights @ grid.theta ** 4
    assert m4 == pytest.approx(3 * 1.7 ** 2, rel=1e-10)


def test_singular_covariance_collapses_a_dimension():
    sigma = np.array([[1.0, 0.0], [0.0, 0.0]])
    grid = gauss_hermite_2d(sigma, 7)
    np.testing.assert_allclose(grid.tau, 0.0, atol=1e-14)
    var_theta = grid.weights @ grid.theta ** 2
    assert var_theta == pytest.approx(1.0, rel=1e-10)


def test_zero_covariance_is_a_point_mass():
    grid = gauss_hermite_2d(np.zeros((2, 2)), 5)
    np.testing.assert_allclose(grid.nodes, 0.0, atol=1e-14)
    assert grid.weights.sum() == pytest.approx(1.0, abs=1e-13)


def test_perfect_correlation_stays_on_the_diagonal():
    sigma = covariance(1.0, 1.0, 1.0)
    grid = gauss_hermite_2d(sigma, 9)
    np.testing.assert_allclose(grid.theta, grid.tau, atol=1e-12)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        gauss_hermite_2d(np.array([[1.0, 2.0], [2.0, 1.0]]), 5)  # not PSD
    with pytest.raises(ValueError):
        gauss_hermite_2d(np.array([[1.0, 0.1], [0.2, 1.0]]), 5)  # asymmetric
    with pytest.raises(ValueError):
        gauss_hermite_2d(np.eye(2), 0)
    with pytest.raises(ValueError):
        gauss_hermite_2d(np.eye(3), 5)
