"""Marginal likelihood and EM fitting behavior."""

import math

import numpy as np
import pytest

from ctdc.errors import EstimationError
from ctdc.estimate import (
    FitOptions,
    FixedParams,
    correlation_with_ci,
    fit_em,
    marginal_log_likelihood,
    marginal_loglik_gradient,
)
from ctdc.likelihood import TaskParams, TraitPair, conditional_log_likelihood
from ctdc.quadrature import gauss_hermite_2d
from ctdc.records import ProcessRecord
from ctdc.tasks import parse_task

FORK_TASK = parse_task("""
task_id: fork
states:
  - {id: 1, end: 0}
  - {id: 2, end: 1}
  - {id: 3, end: 1}
  - {id: 4, end: 1}
initial_state: 1
terminal_states: [2, 3, 4]
knowledge_statuses: [only]
initial_status: only
status_triggers: []
moves:
  - {state: 1, effective: [], ineffective: [2, 3, 4]}
""", "fork.yaml")


def fork_record(person, choice=2):
    return ProcessRecord(person_id=person, task_id="fork",
                         events=((1.0, choice),))


def test_uniform_choice_marginal_is_log_cardinality():
    # all three candidates share one value, so the choice is uniform at
    # every theta; integrating a constant must return it exactly, and
    # a one-action record contributes no timing term
    records = [fork_record(f"p{i}") for i in range(4)]
    for sigma in (np.zeros((2, 2)), np.array([[2.0, 0.3], [0.3, 0.5]])):
        params = FixedParams(betas=(0.7,), gammas=(-1.0,), sigma=sigma)
        ll = marginal_log_likelihood(records, [FORK_TASK], params,
                                     points_per_dim=15)
        assert ll == pytest.approx(4 * -math.log(3.0), abs=1e-10)


def test_zero_covariance_marginal_equals_conditional_at_origin(
        small_cohort, tasks, reference_params):
    records, _ = small_cohort
    params = FixedParams(betas=reference_params.betas,
                         gammas=reference_params.gammas,
                         sigma=np.zeros((2, 2)))
    marginal = marginal_log_likelihood(records, tasks, params)
    by_id = {t.task_id: t for t in tasks}
    origin = TraitPair(0.0, 0.0)
    task_index = {t.task_id: k for k, t in enumerate(tasks)}
    conditional = sum(
        conditional_log_likelihood(
            r, by_id[r.task_id], origin,
            params.task_params(task_index[r.task_id]))
        for r in records if not r.truncated
    )
    assert marginal == pytest.approx(conditional, abs=1e-9)


def _replayed_contexts(task, record):
    """(values array, chosen index) per transition, read straight off
    the task tables; no likelihood code involved."""
    from ctdc.tasks import advance

    h = task.initial_history()
    out = []
    for state in record.states:
        key = (h.current, h.status)
        vals = np.asarray(task.effectiveness[key], dtype=float)
        out.append((vals, task.reachable[key].index(state)))
        h = advance(task, h, state)
    return out


def _brute_force_log_marginal(recs, tasks, params):
    """Numerical double integral of one person's likelihood against the
    trait prior, written independently of the library internals."""
    from scipy import integrate, stats

    task_index = {t.task_id: k for k, t in enumerate(tasks)}
    contexts = []
    timing = []
    for r in recs:
        k = task_index[r.task_id]
        beta, gamma = params.betas[k], params.gammas[k]
        contexts.extend((beta, vals, idx)
                        for vals, idx in _replayed_contexts(tasks[k], r))
        m = len(r.times)
        if m >= 2:
            timing.append((gamma, m - 1, r.times[-1] - r.times[0]))
    prior = stats.multivariate_normal(mean=[0.0, 0.0], cov=params.sigma)

    def loglik(theta, tau):
        total = 0.0
        for beta, vals, idx in contexts:
            z = (beta + theta) * vals
            z = z - z.max()
            total += z[idx] - math.log(np.exp(z).sum())
        for gamma, gaps, dur in timing:
            total += gaps * (gamma + tau) - dur * math.exp(gamma + tau)
        return total

    # work on a shifted scale so the integrand is O(1) at its peak
    grid_t = np.linspace(-8, 8, 33)
    grid_u = np.linspace(-2.5, 2.5, 21)
    shift = max(loglik(th, ta) + prior.logpdf([th, ta])
                for th in grid_t for ta in grid_u)
    f = lambda tau, theta: math.exp(
        loglik(theta, tau) + prior.logpdf([theta, tau]) - shift)
    val, err = integrate.dblquad(f, -14, 14, -3.5, 3.5,
                                 epsabs=1e-11, epsrel=1e-9)
    assert err < 1e-8 * max(val, 1.0)
    return math.log(val) + shift


def test_adaptive_marginal_matches_brute_force_integration(
        small_cohort, tasks, reference_params):
    records, _ = small_cohort
    by_person = {}
    for r in records:
        by_person.setdefault(r.person_id, []).append(r)
    sizes = {p: sum(len(r.events) for r in rs)
             for p, rs in by_person.items()}
    ordered = sorted(sizes, key=sizes.get)
    # a typical person and the heaviest record load (most concentrated
    # posterior, where a fixed prior-located grid would be least exact)
    for pid in (ordered[len(ordered) // 2], ordered[-1]):
        recs = by_person[pid]
        lib = marginal_log_likelihood(recs, tasks, reference_params,
                                      points_per_dim=21)
        oracle = _brute_force_log_marginal(recs, tasks, reference_params)
        assert lib == pytest.approx(oracle, rel=1e-7), pid


def test_adaptive_marginal_insensitive_to_node_count(small_cohort, tasks,
                                                     reference_params):
    records, _ = small_cohort
    coarse = marginal_log_likelihood(records, tasks, reference_params,
                                     points_per_dim=21)
    fine = marginal_log_likelihood(records, tasks, reference_params,
                                   points_per_dim=41)
    assert coarse == pytest.approx(fine, rel=1e-9)


def test_marginal_requires_records(tasks, reference_params):
    with pytest.raises(EstimationError):
        marginal_log_likelihood([], tasks, reference_params)


def test_marginal_task_count_mismatch(small_cohort, tasks):
    records, _ = small_cohort
    wrong = FixedParams(betas=(1.0,), gammas=(-1.0,),
                        sigma=np.eye(2))
    with pytest.raises(ValueError):
        marginal_log_likelihood(records, tasks, wrong)


@pytest.fixture(scope="module")
def small_fit(small_cohort, tasks):
    records, _ = small_cohort
    return fit_em(records, tasks,
                  options=FitOptions(points_per_dim=21, loglik_tol=1e-6,
                                     compute_se=True))


def test_em_trace_is_monotone(small_fit):
    trace = np.asarray(small_fit.loglik_trace)
    assert len(trace) >= 2
    assert np.all(np.diff(trace) >= -1e-8)
    assert small_fit.converged
    assert small_fit.final_marginal_loglik == pytest.approx(trace[-1],
                                                            abs=1e-9)


def test_polished_gradient_is_small(small_fit, small_cohort, tasks):
    records, _ = small_cohort
    grad = marginal_loglik_gradient(records, tasks, small_fit.params,
                                    points_per_dim=21)
    assert small_fit.polished
    assert np.max(np.abs(grad)) < 1e-3


def test_fitted_parameters_are_sane(small_fit, reference_params):
    # 50 persons is noisy; just pin the neighborhood of the truth
    betas = small_fit.params.betas
    gammas = small_fit.params.gammas
    for est, true in zip(betas, reference_params.betas):
        assert abs(est - true) < 0.8
    for est, true in zip(gammas, reference_params.gammas):
        assert abs(est - true) < 0.3
    sigma = small_fit.params.sigma
    assert np.linalg.eigvalsh(sigma).min() >= 0
    assert abs(small_fit.rho) <= 1


def test_standard_errors_shape(small_fit):
    se = small_fit.std_errors
    assert se is not None
    assert set(se) == {"betas", "gammas", "sigma"}
    assert len(se["betas"]) == 2 and len(se["gammas"]) == 2
    assert len(se["sigma"]) == 3
    for block in se.values():
        assert all(np.isfinite(v) and v > 0 for v in block)


def test_fit_drops_incomplete_records(small_cohort, tasks):
    records, _ = small_cohort
    extra = ProcessRecord(person_id="p01", task_id="tickets-task1",
                          events=((3.0, 11), (5.0, 12)))
    fit = fit_em(records + [extra], tasks,
                 options=FitOptions(points_per_dim=11, loglik_tol=1e-3,
                                    polish=False, compute_se=False))
    assert fit.num_dropped_records == 1


def test_fit_rejects_empty_and_degenerate_inputs(tasks):
    with pytest.raises(EstimationError):
        fit_em([], tasks)
    incomplete = ProcessRecord(person_id="p", task_id="tickets-task1",
                               events=((3.0, 11),))
    with pytest.raises(EstimationError):
        fit_em([incomplete], tasks)


def test_fit_rejects_singular_initial_sigma(small_cohort, tasks):
    records, _ = small_cohort
    init = FixedParams(betas=(1.5, 1.7), gammas=(-1.7, -1.4),
                       sigma=np.zeros((2, 2)))
    with pytest.raises(EstimationError):
        fit_em(records, tasks, init=init)


def test_fit_option_overrides_conflict(small_cohort, tasks):
    records, _ = small_cohort
    with pytest.raises(TypeError):
        fit_em(records, tasks, options=FitOptions(), points_per_dim=11)


def test_nonconvergence_is_reported(small_cohort, tasks):
    records, _ = small_cohort
    fit = fit_em(records, tasks,
                 options=FitOptions(points_per_dim=11, max_iters=2,
                                    loglik_tol=1e-12, polish=False,
                                    compute_se=False))
    assert not fit.converged
    assert fit.em_iterations == 2


def test_correlation_ci_structure(small_cohort, tasks, small_fit):
    records, _ = small_cohort
    res = correlation_with_ci(small_fit, records, tasks, bootstrap_reps=25,
                              rng_seed=3)
    assert res.num_reps == 25
    assert res.num_failed == 0
    assert -1 <= res.lower <= res.upper <= 1
    assert res.rho == pytest.approx(small_fit.rho, abs=1e-12)
    again = correlation_with_ci(small_fit, records, tasks, bootstrap_reps=25,
                                rng_seed=3)
    assert (again.lower, again.upper) == (res.lower, res.upper)
