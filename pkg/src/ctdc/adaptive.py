"""Per-person adapted Gauss-Hermite integration of trait posteriors.

The conditional log-likelihood separates into a choice part that depends
only on theta and a timing part that depends only on tau; the two traits
couple only through the normal prior. Each person's marginal likelihood
is therefore a smooth two-dimensional integral that a product
Gauss-Hermite rule integrates to near machine precision once the nodes
are centered on that person's posterior mode and scaled by the local
curvature. A shared prior-scaled grid cannot do this: a long record
concentrates the posterior between prior-spaced nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .errors import EstimationError

_LOG_2PI = math.log(2.0 * math.pi)
_MIN_EIGENVALUE = 1e-10
_SQRT2 = math.sqrt(2.0)


def prior_precision(sigma):
    """Inverse and log-determinant of the 2x2 trait covariance.

    Raises EstimationError when the covariance is singular or nearly so;
    adapted quadrature needs a full-rank prior.
    """
    sigma = np.asarray(sigma, dtype=float)
    eigs = np.linalg.eigvalsh(sigma)
    if eigs.min() < _MIN_EIGENVALUE:
        raise EstimationError(
            "trait covariance is singular or nearly so; integration "
            "against a degenerate prior needs an explicit grid"
        )
    det = float(sigma[0, 0] * sigma[1, 1] - sigma[0, 1] ** 2)
    prec = np.array(
        [[sigma[1, 1], -sigma[0, 1]], [-sigma[0, 1], sigma[0, 0]]]
    ) / det
    return prec, math.log(det)


def _data_value(compiled, task_ids, params, theta, tau):
    """Conditional log-likelihood of every person at person-specific
    traits: the choice part at theta plus the timing part at tau."""
    total = np.zeros_like(np.asarray(theta, dtype=float))
    for k, tid in enumerate(task_ids):
        ct = compiled[tid]
        total += ct.choice_loglik(params.betas[k], theta)
        total += ct.timing_loglik(params.gammas[k], tau)
    return total


def _data_stats(compiled, task_ids, params, theta, tau):
    """Value and separable derivatives of the data log-likelihood.

    Returns (value, d_theta, d_tau, d2_theta, d2_tau); the cross second
    derivative is identically zero because the choice part depends only
    on theta and the timing part only on tau.
    """
    theta = np.asarray(theta, dtype=float)
    value = np.zeros_like(theta)
    g_theta = np.zeros_like(theta)
    g_tau = np.zeros_like(theta)
    h_theta = np.zeros_like(theta)
    h_tau = np.zeros_like(theta)
    for k, tid in enumerate(task_ids):
        ct = compiled[tid]
        f, f1, f2 = ct.choice_score(params.betas[k], theta)
        h, h1, h2 = ct.timing_score(params.gammas[k], tau)
        value += f + h
        g_theta += f1
        g_tau += h1
        h_theta += f2
        h_tau += h2
    return value, g_theta, g_tau, h_theta, h_tau


def posterior_modes(compiled, task_ids, params, prec, start=None,
                    gtol=1e-9, max_iters=100):
    """Posterior mode and curvature of every person's trait posterior.

    The log posterior is concave: both data parts have nonpositive
    second derivatives and the log prior is a negative quadratic, so
    damped Newton converges from any start. Returns (mode_theta,
    mode_tau, a, b, c) where [[a, b], [b, c]] is the negated posterior
    Hessian at the mode, elementwise over persons.

    Parameters
    ----------
    prec : (2, 2) array
        Prior precision, the inverse trait covariance.
    start : optional pair of (N,) arrays
        Warm-start modes from a nearby parameter point.
    """
    some = compiled[task_ids[0]]
    n = some.counts.shape[0]
    if start is not None:
        theta = np.array(start[0], dtype=float)
        tau = np.array(start[1], dtype=float)
    else:
        theta = np.zeros(n)
        tau = np.zeros(n)
    p11, p12, p22 = prec[0, 0], prec[0, 1], prec[1, 1]

    def prior_quad(th, ta):
        return 0.5 * (p11 * th ** 2 + 2.0 * p12 * th * ta + p22 * ta ** 2)

    for _ in range(max_iters):
        value, g_theta, g_tau, h_theta, h_tau = _data_stats(
            compiled, task_ids, params, theta, tau
        )
        g_theta -= p11 * theta + p12 * tau
        g_tau -= p12 * theta + p22 * tau
        a = p11 - h_theta
        c = p22 - h_tau
        b = p12
        # convergence relative to the local curvature scale
        done = (np.abs(g_theta) < gtol * (1.0 + a)) & (
            np.abs(g_tau) < gtol * (1.0 + c)
        )
        if done.all():
            return theta, tau, a, np.full(n, b), c
        det = a * c - b * b
        d_theta = (c * g_theta - b * g_tau) / det
        d_tau = (a * g_tau - b * g_theta) / det
        # cap the step length, preserving its direction so it stays an
        # ascent direction of the concave objective
        longest = np.maximum(np.abs(d_theta), np.abs(d_tau))
        shrink = np.where(longest > 10.0, 10.0 / np.maximum(longest, 1e-300), 1.0)
        d_theta = d_theta * shrink
        d_tau = d_tau * shrink
        current = value - prior_quad(theta, tau)
        scale = np.ones(n)
        for _ in range(40):
            th_try = theta + scale * d_theta
            ta_try = tau + scale * d_tau
            trial = _data_value(compiled, task_ids, params, th_try, ta_try)
            trial -= prior_quad(th_try, ta_try)
            bad = ~(trial >= current - 1e-10 * (1.0 + np.abs(current)))
            bad &= ~done
            if not bad.any():
                break
            scale[bad] *= 0.5
        else:
            scale[bad] = 0.0
        scale[done] = 0.0
        theta = theta + scale * d_theta
        tau = tau + scale * d_tau
    raise EstimationError("posterior mode search did not converge")


@dataclass
class AdaptedPosterior:
    """Per-person marginal log-likelihood and posterior node weights on
    product Gauss-Hermite nodes centered at each posterior mode."""

    log_marginal: np.ndarray        # (N,)
    theta_nodes: np.ndarray         # (N, Q)
    tau_nodes: np.ndarray           # (N, Q)
    resp: np.ndarray | None         # (N, Q, Q), rows sum to one
    mode_theta: np.ndarray          # (N,)
    mode_tau: np.ndarray            # (N,)
    sd_theta: np.ndarray            # (N,) curvature scale, not posterior sd
    sd_tau: np.ndarray

    def theta_weights(self):
        return self.resp.sum(axis=2)

    def tau_weights(self):
        return self.resp.sum(axis=1)


def adapted_posterior(compiled, task_ids, params, points_per_dim,
                      start=None, with_resp=True):
    """Integrate every person's posterior on mode-centered nodes.

    The transformed integrand log w_q + x_q^2 is bounded in the node
    index, so no weight underflows regardless of how concentrated a
    posterior is.

    Parameters
    ----------
    points_per_dim : int
        Gauss-Hermite nodes per trait dimension.
    start : optional pair of (N,) arrays
        Warm-start for the mode search.
    with_resp : bool
        When False the posterior node weights are not materialized.

    Returns
    -------
    AdaptedPosterior
    """
    prec, logdet = prior_precision(params.sigma)
    mode_theta, mode_tau, a, b, c = posterior_modes(
        compiled, task_ids, params, prec, start=start
    )
    det = a * c - b * b
    sd_theta = np.sqrt(c / det)
    sd_tau = np.sqrt(a / det)

    x, w = hermgauss(points_per_dim)
    gain = np.log(w) + x ** 2
    theta_nodes = mode_theta[:, None] + _SQRT2 * sd_theta[:, None] * x[None, :]
    tau_nodes = mode_tau[:, None] + _SQRT2 * sd_tau[:, None] * x[None, :]

    f = np.zeros_like(theta_nodes)
    h = np.zeros_like(tau_nodes)
    for k, tid in enumerate(task_ids):
        ct = compiled[tid]
        f += ct.choice_loglik(params.betas[k], theta_nodes)
        h += ct.timing_loglik(params.gammas[k], tau_nodes)

    p11, p12, p22 = prec[0, 0], prec[0, 1], prec[1, 1]
    part_theta = (
        f + gain[None, :] - 0.5 * p11 * theta_nodes ** 2
        + np.log(_SQRT2 * sd_theta)[:, None]
    )
    part_tau = (
        h + gain[None, :] - 0.5 * p22 * tau_nodes ** 2
        + np.log(_SQRT2 * sd_tau)[:, None]
    )
    core = part_theta[:, :, None] + part_tau[:, None, :]
    core -= p12 * theta_nodes[:, :, None] * tau_nodes[:, None, :]
    core -= _LOG_2PI + 0.5 * logdet
    flat = core.reshape(core.shape[0], -1)
    high = flat.max(axis=1)
    weights = np.exp(flat - high[:, None])
    total = weights.sum(axis=1)
    log_marginal = high + np.log(total)
    if not np.all(np.isfinite(log_marginal)):
        raise EstimationError(
            "posterior integration underflowed for at least one person"
        )
    resp = None
    if with_resp:
        resp = (weights / total[:, None]).reshape(core.shape)
    return AdaptedPosterior(
        log_marginal=log_marginal,
        theta_nodes=theta_nodes,
        tau_nodes=tau_nodes,
        resp=resp,
        mode_theta=mode_theta,
        mode_tau=mode_tau,
        sd_theta=sd_theta,
        sd_tau=sd_tau,
    )
