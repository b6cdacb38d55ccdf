"""Person trait estimation given fitted fixed parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adaptive import adapted_posterior
from .errors import EstimationError
from .estimate import (
    _loglik_matrix,
    _well_conditioned,
    normalize_tasks,
    usable_records,
)
from .likelihood import FixedParams, TraitPair, compile_cohort
from .quadrature import QuadratureGrid, gauss_hermite_2d
from .validation import psd_factor


@dataclass(frozen=True)
class TraitEstimate:
    person_id: str
    eap: TraitPair
    posterior_sd: tuple
    map_estimate: TraitPair | None = None


def score_eap(records, tasks, params: FixedParams,
              grid: QuadratureGrid | None = None, points_per_dim: int = 41,
              person_ids=None, include_map: bool = False):
    """EAP trait estimates (posterior means) for every person.

    Persons listed in `person_ids` but carrying no usable records get
    the prior: eap exactly (0, 0) and prior standard deviations. When
    `person_ids` is None the roster is taken from the records in first
    appearance order.

    By default each person's posterior is integrated on Gauss-Hermite
    nodes centered at that person's posterior mode; passing a grid
    forces shared nodes, and a degenerate trait covariance falls back
    to a grid located at the prior.

    Returns a list of TraitEstimate aligned with the roster.
    """
    tasks = normalize_tasks(tasks)
    records, _ = usable_records(records, tasks)
    scored_ids, compiled = compile_cohort(records, tasks)
    if person_ids is None:
        roster = list(scored_ids)
    else:
        roster = [str(p) for p in person_ids]
        missing = set(scored_ids) - set(roster)
        if missing:
            raise ValueError(
                f"records present for persons outside the roster: "
                f"{sorted(missing)[:5]}"
            )
    task_ids = tuple(tasks)
    row_of = {p: i for i, p in enumerate(scored_ids)}

    eap = {}
    sd = {}
    maps = {}
    if scored_ids and grid is None and _well_conditioned(params.sigma):
        post = adapted_posterior(compiled, task_ids, params, points_per_dim)
        theta_w = post.theta_weights()
        tau_w = post.tau_weights()
        m_theta = np.sum(theta_w * post.theta_nodes, axis=1)
        m_tau = np.sum(tau_w * post.tau_nodes, axis=1)
        v_theta = np.sum(theta_w * post.theta_nodes ** 2, axis=1) - m_theta ** 2
        v_tau = np.sum(tau_w * post.tau_nodes ** 2, axis=1) - m_tau ** 2
        sd_theta = np.sqrt(np.clip(v_theta, 0.0, None))
        sd_tau = np.sqrt(np.clip(v_tau, 0.0, None))
        for p, i in row_of.items():
            eap[p] = TraitPair(float(m_theta[i]), float(m_tau[i]))
            sd[p] = (float(sd_theta[i]), float(sd_tau[i]))
            if include_map:
                maps[p] = TraitPair(
                    float(post.mode_theta[i]), float(post.mode_tau[i])
                )
    elif scored_ids:
        if grid is None:
            grid = gauss_hermite_2d(params.sigma, points_per_dim)
        ll = _loglik_matrix(compiled, task_ids, params, grid)
        z = ll + np.log(grid.weights)[None, :]
        z -= z.max(axis=1, keepdims=True)
        resp = np.exp(z)
        norm = resp.sum(axis=1, keepdims=True)
        if not np.all(norm > 0):
            raise EstimationError("posterior weights underflowed while scoring")
        resp /= norm
        means = resp @ grid.nodes
        second = resp @ grid.nodes ** 2
        variances = np.clip(second - means ** 2, 0.0, None)
        sds = np.sqrt(variances)
        for p, i in row_of.items():
            eap[p] = TraitPair(float(means[i, 0]), float(means[i, 1]))
            sd[p] = (float(sds[i, 0]), float(sds[i, 1]))
            if include_map:
                maps[p] = _map_newton(compiled, task_ids, params, i, eap[p])

    prior_sd = (math.sqrt(params.sigma[0, 0]), math.sqrt(params.sigma[1, 1]))
    out = []
    for p in roster:
        if p in eap:
            out.append(TraitEstimate(p, eap[p], sd[p], maps.get(p)))
        else:
            map_est = TraitPair(0.0, 0.0) if include_map else None
            out.append(
                TraitEstimate(p, TraitPair(0.0, 0.0), prior_sd, map_est)
            )
    return out


def _person_loglik_parts(compiled, task_ids, params, row, theta, tau):
    """(value, gradient, Hessian diag) of the data log-likelihood in
    (theta, tau) for one person."""
    value = 0.0
    g_theta = g_tau = 0.0
    h_theta = h_tau = 0.0
    for k, tid in enumerate(task_ids):
        ct = compiled[tid]
        counts = ct.counts[row]
        G, G1, G2 = ct.contexts.score_stats(params.betas[k] + theta)
        value += float(counts @ G[0])
        g_theta += float(counts @ G1[0])
        h_theta += float(counts @ G2[0])
        rate = math.exp(params.gammas[k] + tau)
        gaps = float(ct.num_gaps[row])
        dur = float(ct.duration[row])
        value += gaps * (params.gammas[k] + tau) - dur * rate
        g_tau += gaps - dur * rate
        h_tau += -dur * rate
    return value, np.array([g_theta, g_tau]), np.array([h_theta, h_tau])


def _map_newton(compiled, task_ids, params, row, start, max_iters=100,
                gtol=1e-8):
    """Posterior mode via Newton ascent in whitened coordinates.

    With traits x = L z the prior is standard normal in z, so the
    Hessian L' H L - I is negative definite for any PSD L and the
    ascent is globally safe with step halving.
    """
    lower = psd_factor(params.sigma)
    if np.allclose(lower, 0.0):
        return TraitPair(0.0, 0.0)
    # start from the EAP pulled back to z when the factor is invertible
    if lower[0, 0] > 0 and lower[1, 1] > 0:
        z = np.linalg.solve(lower, np.array([start.theta, start.tau]))
    else:
        z = np.zeros(2)

    def logpost(z):
        x = lower @ z
        value, _, _ = _person_loglik_parts(
            compiled, task_ids, params, row, x[0], x[1]
        )
        return value - 0.5 * float(z @ z)

    lp = logpost(z)
    for _ in range(max_iters):
        x = lower @ z
        _, grad_x, hess_x = _person_loglik_parts(
            compiled, task_ids, params, row, x[0], x[1]
        )
        grad = lower.T @ grad_x - z
        if np.max(np.abs(grad)) < gtol:
            x = lower @ z
            return TraitPair(float(x[0]), float(x[1]))
        hess = lower.T @ (hess_x[:, None] * lower) - np.eye(2)
        step = np.linalg.solve(hess, -grad)
        scale = 1.0
        while scale > 1e-12:
            lp_new = logpost(z + scale * step)
            if lp_new >= lp:
                break
            scale *= 0.5
        z = z + scale * step
        lp = logpost(z)
    raise EstimationError("MAP Newton did not converge in 100 iterations")


def score_map(records, tasks, params: FixedParams) -> TraitPair:
    """Posterior mode of the traits for records of a single person."""
    tasks = normalize_tasks(tasks)
    records, _ = usable_records(records, tasks)
    persons = {r.person_id for r in records}
    if len(persons) > 1:
        raise ValueError(
            f"score_map expects one person's records, got {len(persons)}"
        )
    if not records:
        return TraitPair(0.0, 0.0)
    estimates = score_eap(
        records, tasks, params, points_per_dim=41, include_map=True
    )
    return estimates[0].map_estimate
