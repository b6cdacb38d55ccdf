"""Two-dimensional Gauss-Hermite quadrature adapted to N(0, Sigma)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import check_covariance, check_positive_int, psd_factor


@dataclass(frozen=True)
class QuadratureGrid:
    """Nodes and weights approximating expectations under N(0, Sigma).

    nodes[q] = (theta_q, tau_q); weights are positive and sum to one, so
    sum_q w_q g(node_q) approximates E[g(theta, tau)].
    """

    nodes: np.ndarray
    weights: np.ndarray
    points_per_dim: int
    sigma: np.ndarray

    @property
    def theta(self):
        return self.nodes[:, 0]

    @property
    def tau(self):
        return self.nodes[:, 1]


def gauss_hermite_2d(sigma, points_per_dim: int = 21) -> QuadratureGrid:
    """Tensor-product Gauss-Hermite grid transformed by a factor of Sigma.

    The physicists' rule for weight exp(-x^2) is rescaled to the standard
    normal (z = sqrt(2) x, w / sqrt(pi)) and pushed through a lower
    triangular factor L of Sigma, so nodes are L z and weighted moments
    match N(0, Sigma). Weighted second moments reproduce Sigma exactly
    for points_per_dim >= 2; weights are renormalized to sum to one.
    """
    points_per_dim = check_positive_int(points_per_dim, "points_per_dim")
    sigma = check_covariance(sigma)
    x, w = np.polynomial.hermite.hermgauss(points_per_dim)
    z = x * np.sqrt(2.0)
    w = w / np.sqrt(np.pi)
    z1, z2 = np.meshgrid(z, z, indexing="ij")
    standard = np.column_stack([z1.ravel(), z2.ravel()])
    weights = np.outer(w, w).ravel()
    weights = weights / weights.sum()
    lower = psd_factor(sigma)
    nodes = standard @ lower.T
    return QuadratureGrid(
        nodes=nodes,
        weights=weights,
        points_per_dim=points_per_dim,
        sigma=sigma,
    )
