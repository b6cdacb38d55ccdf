"""Maximum marginal likelihood estimation of the fixed parameters.

The marginal likelihood integrates each person's product of per-task
conditional likelihoods against the bivariate normal trait prior; the
integral is evaluated by Gauss-Hermite product rules centered on each
person's posterior mode and scaled by the local curvature, which stays
accurate for records of any length. Fitting runs EM whose closed-form
sigma and gamma updates and single-Newton-step beta updates ascend the
expected complete-data objective on the current nodes; since any move
re-centers the nodes, the joint step is damped until the measured
marginal log-likelihood does not decrease. A direct Newton polish on
the unconstrained parameterization then tightens the gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.special import logsumexp

from .adaptive import adapted_posterior
from .errors import EstimationError
from .likelihood import FixedParams, compile_cohort
from .quadrature import QuadratureGrid, gauss_hermite_2d
from .records import is_complete
from .tasks import TaskDefinition, builtin_task
from .validation import check_positive_int

# below this eigenvalue floor the prior is treated as degenerate and
# integration falls back to a grid located at the prior itself
_EIG_FLOOR = 1e-8


@dataclass(frozen=True)
class FitOptions:
    points_per_dim: int = 21
    max_iters: int = 500
    loglik_tol: float = 1e-6
    param_tol: float = 0.0
    polish: bool = True
    polish_gtol: float = 1e-4
    polish_max_iters: int = 40
    compute_se: bool = True


@dataclass
class FitResult:
    params: FixedParams
    std_errors: dict | None
    final_marginal_loglik: float
    em_iterations: int
    converged: bool
    loglik_trace: tuple
    task_ids: tuple
    person_ids: tuple
    num_dropped_records: int = 0
    polished: bool = False
    se_note: str = ""
    points_per_dim: int = 21

    @property
    def rho(self):
        s = self.params.sigma
        denom = math.sqrt(s[0, 0] * s[1, 1])
        return float(s[0, 1] / denom) if denom > 0 else 0.0


def normalize_tasks(tasks):
    """Accept TaskDefinitions, builtin ids, or a mapping; return an
    ordered task_id -> TaskDefinition dict."""
    if isinstance(tasks, dict):
        return dict(tasks)
    out = {}
    for t in tasks:
        task = builtin_task(t) if isinstance(t, str) else t
        if task.task_id in out:
            raise ValueError(f"duplicate task {task.task_id}")
        out[task.task_id] = task
    return out


def usable_records(records, tasks):
    """Split records into (usable, dropped): a record is usable when it
    is not truncated and ends in a terminal state of its task."""
    usable, dropped = [], []
    for r in records:
        task = tasks.get(r.task_id)
        if task is None:
            raise EstimationError(f"record {r.person_id} has unknown task {r.task_id}")
        if r.truncated or not is_complete(r, task):
            dropped.append(r)
        else:
            usable.append(r)
    return usable, dropped


def _loglik_matrix(compiled, task_ids, params, grid):
    theta, tau = grid.theta, grid.tau
    total = None
    for k, tid in enumerate(task_ids):
        ll = compiled[tid].person_node_loglik(
            params.betas[k], params.gammas[k], theta, tau
        )
        total = ll if total is None else total + ll
    return total


def _marginal_from_compiled(compiled, task_ids, params, grid):
    ll = _loglik_matrix(compiled, task_ids, params, grid)
    per_person = logsumexp(ll + np.log(grid.weights)[None, :], axis=1)
    if not np.all(np.isfinite(per_person)):
        raise EstimationError(
            "posterior weights underflowed for at least one person; the "
            "quadrature grid does not cover the likelihood"
        )
    return float(per_person.sum())


def _marginal_routed(compiled, task_ids, params, points_per_dim,
                     grid=None, start=None):
    """Marginal log-likelihood total: person-adapted nodes by default,
    the given or prior-located grid otherwise."""
    if grid is None and _well_conditioned(params.sigma):
        post = adapted_posterior(
            compiled, task_ids, params, points_per_dim,
            start=start, with_resp=False,
        )
        return float(post.log_marginal.sum())
    if grid is None:
        grid = gauss_hermite_2d(params.sigma, points_per_dim)
    return _marginal_from_compiled(compiled, task_ids, params, grid)


def _well_conditioned(sigma):
    return float(np.linalg.eigvalsh(sigma).min()) >= _EIG_FLOOR


def marginal_log_likelihood(records, tasks, params: FixedParams,
                            grid: QuadratureGrid | None = None,
                            points_per_dim: int = 21) -> float:
    """Marginal log-likelihood of complete records under fixed parameters.

    By default each person's integral runs on Gauss-Hermite nodes
    centered at that person's posterior mode. Passing a grid forces
    evaluation on those shared nodes instead; a degenerate trait
    covariance falls back to a grid located at the prior, which for a
    zero covariance reduces to the conditional log-likelihood at the
    origin.
    """
    tasks = normalize_tasks(tasks)
    records = list(records)
    if not records:
        raise EstimationError("no records")
    if len(tasks) != params.num_tasks:
        raise ValueError(
            f"{len(tasks)} tasks but parameters for {params.num_tasks}"
        )
    _, compiled = compile_cohort(records, tasks)
    return _marginal_routed(compiled, tuple(tasks), params, points_per_dim,
                            grid=grid)


def _initial_params(compiled, task_ids):
    betas, gammas = [], []
    for tid in task_ids:
        ct = compiled[tid]
        gaps = float(ct.num_gaps.sum())
        dur = float(ct.duration.sum())
        gammas.append(math.log(gaps / dur) if gaps > 0 and dur > 0 else 0.0)
        betas.append(0.0)
    sigma0 = np.diag([1.0, 0.25])
    return FixedParams(betas=tuple(betas), gammas=tuple(gammas), sigma=sigma0)


def _pack(params: FixedParams):
    lower = np.linalg.cholesky(params.sigma)
    return np.concatenate([
        params.betas,
        params.gammas,
        [math.log(lower[0, 0]), lower[1, 0], math.log(lower[1, 1])],
    ])


def _unpack(x, num_tasks: int) -> FixedParams:
    k = num_tasks
    a, b, c = x[2 * k], x[2 * k + 1], x[2 * k + 2]
    lower = np.array([[math.exp(a), 0.0], [b, math.exp(c)]])
    return FixedParams(
        betas=tuple(x[:k]), gammas=tuple(x[k:2 * k]), sigma=lower @ lower.T
    )


def _central_gradient(f, x, rel_step=1e-4):
    g = np.zeros_like(x)
    for i in range(len(x)):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def _central_hessian(f, x, rel_step=1e-4):
    n = len(x)
    hs = np.array([rel_step * max(1.0, abs(x[i])) for i in range(n)])
    hess = np.zeros((n, n))
    f0 = f(x)
    for i in range(n):
        xp, xm = x.copy(), x.copy()
        xp[i] += hs[i]
        xm[i] -= hs[i]
        hess[i, i] = (f(xp) - 2.0 * f0 + f(xm)) / hs[i] ** 2
    for i in range(n):
        for j in range(i + 1, n):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[i] += hs[i]; xpp[j] += hs[j]
            xpm[i] += hs[i]; xpm[j] -= hs[j]
            xmp[i] -= hs[i]; xmp[j] += hs[j]
            xmm[i] -= hs[i]; xmm[j] -= hs[j]
            hess[i, j] = hess[j, i] = (
                f(xpp) - f(xpm) - f(xmp) + f(xmm)
            ) / (4.0 * hs[i] * hs[j])
    return hess


def _objective_fn(compiled, task_ids, num_tasks, points_per_dim):
    """Marginal log-likelihood as a function of the unconstrained
    parameter vector, on person-adapted nodes.

    Consecutive evaluations differ by small parameter steps, so each
    mode search warm-starts from the previous one; the modes are
    re-converged to a tight tolerance either way, keeping the value
    independent of evaluation order to well below the finite-difference
    resolution.
    """
    cache = {"start": None}

    def f(x):
        params = _unpack(x, num_tasks)
        post = adapted_posterior(
            compiled, task_ids, params, points_per_dim,
            start=cache["start"], with_resp=False,
        )
        cache["start"] = (post.mode_theta, post.mode_tau)
        return float(post.log_marginal.sum())

    return f


def _polish(params, compiled, task_ids, options: FitOptions):
    """Newton ascent on the unconstrained parameterization.

    EM increments shrink geometrically near the optimum, so it can stop
    (by loglik tolerance) while the gradient is still well above the
    target; a few Newton steps close that gap. Falls back to gradient
    steps whenever the Hessian is unusable, and never decreases the
    objective.
    """
    if not _well_conditioned(params.sigma):
        return params, None, "polish skipped: fitted covariance is near singular"
    f = _objective_fn(compiled, task_ids, params.num_tasks, options.points_per_dim)
    x = _pack(params)
    fx = f(x)
    for _ in range(options.polish_max_iters):
        grad = _central_gradient(f, x)
        if np.max(np.abs(grad)) < options.polish_gtol:
            break
        hess = _central_hessian(f, x)
        try:
            direction = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            direction = grad / max(np.max(np.abs(grad)), 1.0)
        if float(direction @ grad) <= 0:
            direction = grad / max(np.max(np.abs(grad)), 1.0)
        step = 1.0
        improved = False
        while step > 1e-10:
            x_new = x + step * direction
            try:
                fx_new = f(x_new)
            except (EstimationError, OverflowError):
                fx_new = -np.inf
            if fx_new >= fx:
                improved = fx_new > fx
                x, fx = x_new, fx_new
                break
            step *= 0.5
        if not improved:
            break
    return _unpack(x, params.num_tasks), fx, ""


def fit_em(records, tasks, init: FixedParams | None = None,
           options: FitOptions | None = None, **option_overrides) -> FitResult:
    """Fit (beta, gamma, sigma) by EM under the PSD constraint on sigma.

    Truncated and incomplete records are dropped before fitting. The
    marginal log-likelihood is asserted non-decreasing (tolerance 1e-8)
    at every EM iteration; a decrease raises EstimationError.
    """
    if options is None:
        options = FitOptions(**option_overrides)
    elif option_overrides:
        raise TypeError("pass either options or keyword overrides, not both")
    check_positive_int(options.points_per_dim, "points_per_dim")
    check_positive_int(options.max_iters, "max_iters")

    tasks = normalize_tasks(tasks)
    task_ids = tuple(tasks)
    records, dropped = usable_records(records, tasks)
    if not records:
        raise EstimationError("no records (all were truncated or incomplete)")
    person_ids, compiled = compile_cohort(records, tasks)
    num_tasks = len(task_ids)

    params = init if init is not None else _initial_params(compiled, task_ids)
    if params.num_tasks != num_tasks:
        raise ValueError(
            f"init has {params.num_tasks} tasks, data has {num_tasks}"
        )

    n = len(person_ids)
    if not _well_conditioned(params.sigma):
        raise EstimationError(
            "initial trait covariance is singular or nearly so"
        )

    def eval_state(p, start=None):
        post = adapted_posterior(
            compiled, task_ids, p, options.points_per_dim, start=start
        )
        return post, float(post.log_marginal.sum())

    trace = []
    converged = False
    prev_ll = -np.inf
    prev_vec = None
    iterations = 0
    post, ll = eval_state(params)
    for iteration in range(options.max_iters):
        if ll < prev_ll - 1e-8:
            raise EstimationError(
                f"marginal log-likelihood decreased at iteration {iteration}: "
                f"{prev_ll:.10f} -> {ll:.10f}"
            )
        trace.append(ll)
        iterations = iteration + 1
        if iteration > 0 and abs(ll - prev_ll) < options.loglik_tol:
            converged = True
            break
        prev_ll = ll

        theta_w = post.theta_weights()
        tau_w = post.tau_weights()

        # sigma candidate: posterior second moment, PSD by construction
        s11 = float(np.einsum("nq,nq->", theta_w, post.theta_nodes ** 2))
        s22 = float(np.einsum("nq,nq->", tau_w, post.tau_nodes ** 2))
        s12 = float(np.einsum("nij,ni,nj->", post.resp,
                              post.theta_nodes, post.tau_nodes))
        sigma_cand = np.array([[s11, s12], [s12, s22]]) / n

        exp_tau = np.einsum("nq,nq->n", tau_w, np.exp(post.tau_nodes))
        betas_cand, gammas_cand = [], []
        for k, tid in enumerate(task_ids):
            ct = compiled[tid]
            gaps = float(ct.num_gaps.sum())
            weighted_dur = float(ct.duration @ exp_tau)
            if gaps > 0 and weighted_dur > 0:
                gammas_cand.append(math.log(gaps) - math.log(weighted_dur))
            else:
                gammas_cand.append(params.gammas[k])
            # one Newton step of the expected choice log-likelihood
            _, f1, f2 = ct.choice_score(params.betas[k], post.theta_nodes)
            grad = float(np.sum(theta_w * f1))
            hess = float(np.sum(theta_w * f2))
            step_k = -grad / hess if hess < -1e-12 else 0.0
            betas_cand.append(params.betas[k] + max(-2.0, min(2.0, step_k)))

        # Every update ascends the expected complete-data objective on
        # the current nodes, but any parameter move re-centers the nodes,
        # so the joint step is damped toward the current point until the
        # measured log-likelihood does not decrease. When no damping
        # level helps, ascent is exhausted at quadrature resolution.
        beta_old, gamma_old = params.betas, params.gammas
        sigma_old = params.sigma
        step = 1.0
        accepted = False
        for _ in range(12):
            sigma_try = sigma_old + step * (sigma_cand - sigma_old)
            trial = FixedParams(
                betas=tuple(
                    b0 + step * (b1 - b0)
                    for b0, b1 in zip(beta_old, betas_cand)
                ),
                gammas=tuple(
                    g0 + step * (g1 - g0)
                    for g0, g1 in zip(gamma_old, gammas_cand)
                ),
                sigma=0.5 * (sigma_try + sigma_try.T),
            )
            try:
                trial_post, trial_ll = eval_state(
                    trial, start=(post.mode_theta, post.mode_tau)
                )
            except EstimationError:
                trial_post = None
            if trial_post is not None and trial_ll >= ll - 1e-10:
                params, post, ll, accepted = trial, trial_post, trial_ll, True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break

        vec = np.concatenate([
            params.betas, params.gammas,
            [params.sigma[0, 0], params.sigma[0, 1], params.sigma[1, 1]],
        ])
        if (options.param_tol > 0 and prev_vec is not None
                and np.max(np.abs(vec - prev_vec)) < options.param_tol):
            converged = True
            break
        prev_vec = vec

    final_ll = ll
    if final_ll < trace[-1] - 1e-8:
        raise EstimationError(
            f"marginal log-likelihood decreased after the final M-step: "
            f"{trace[-1]:.10f} -> {final_ll:.10f}"
        )
    if final_ll != trace[-1]:
        trace.append(final_ll)
    polished = False
    if options.polish:
        params_p, ll_p, note = _polish(params, compiled, task_ids, options)
        if ll_p is not None and ll_p >= final_ll - 1e-8:
            params, polished = params_p, True
            final_ll = max(ll_p, final_ll)
            trace.append(final_ll)

    std_errors = None
    se_note = ""
    if options.compute_se:
        std_errors, se_note = _std_errors_from_compiled(
            compiled, task_ids, params, options.points_per_dim
        )

    return FitResult(
        params=params,
        std_errors=std_errors,
        final_marginal_loglik=final_ll,
        em_iterations=iterations,
        converged=converged,
        loglik_trace=tuple(trace),
        task_ids=task_ids,
        person_ids=tuple(person_ids),
        num_dropped_records=len(dropped),
        polished=polished,
        se_note=se_note,
        points_per_dim=options.points_per_dim,
    )


def marginal_loglik_gradient(records, tasks, params: FixedParams,
                             points_per_dim: int = 21, rel_step: float = 1e-4):
    """Central-difference gradient in the unconstrained parameterization.

    Order: betas, gammas, then (log L11, L21, log L22) of the Cholesky
    factor of sigma. The integration nodes are re-adapted to the
    parameters at every evaluation, matching the fitting objective.
    """
    tasks = normalize_tasks(tasks)
    records, _ = usable_records(records, tasks)
    _, compiled = compile_cohort(records, tasks)
    f = _objective_fn(compiled, tuple(tasks), params.num_tasks, points_per_dim)
    return _central_gradient(f, _pack(params), rel_step=rel_step)


def _std_errors_from_compiled(compiled, task_ids, params, points_per_dim):
    k = params.num_tasks
    if not _well_conditioned(params.sigma):
        return None, "standard errors withheld: fitted covariance is singular"
    f = _objective_fn(compiled, task_ids, k, points_per_dim)
    x = _pack(params)
    hess = _central_hessian(f, x)
    eig = np.linalg.eigvalsh(hess)
    if eig.max() >= 0:
        return None, (
            "standard errors withheld: numerical Hessian is not negative "
            f"definite (max eigenvalue {eig.max():.3e})"
        )
    cov = np.linalg.inv(-hess)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    a, b = x[2 * k], x[2 * k + 1]
    c = x[2 * k + 2]
    ea, ec = math.exp(a), math.exp(c)
    jac = np.array([
        [2.0 * ea * ea, 0.0, 0.0],
        [ea * b, ea, 0.0],
        [0.0, 2.0 * b, 2.0 * ec * ec],
    ])
    cov_chol = cov[2 * k:, 2 * k:]
    cov_sigma = jac @ cov_chol @ jac.T
    se_sigma = np.sqrt(np.clip(np.diag(cov_sigma), 0.0, None))
    return {
        "betas": tuple(float(v) for v in se[:k]),
        "gammas": tuple(float(v) for v in se[k:2 * k]),
        "sigma": tuple(float(v) for v in se_sigma),
    }, ""


def standard_errors(records, tasks, params: FixedParams,
                    points_per_dim: int = 21):
    """Numerical-Hessian standard errors at a fitted optimum.

    Returns (se, note): se is a dict with keys betas, gammas, and sigma
    (the latter ordered theta variance, covariance, tau variance), or
    None with an explanatory note when the Hessian is not negative
    definite.
    """
    tasks = normalize_tasks(tasks)
    records, _ = usable_records(records, tasks)
    _, compiled = compile_cohort(records, tasks)
    return _std_errors_from_compiled(compiled, tuple(tasks), params,
                                     points_per_dim)


@dataclass
class CorrelationCI:
    rho: float
    lower: float
    upper: float
    num_reps: int
    num_failed: int
    note: str = ""


def _bootstrap_rho(records_by_person, person_ids, tasks, init, options, seed):
    rng = np.random.default_rng(seed)
    n = len(person_ids)
    idx = rng.integers(0, n, n)
    resampled = []
    for j, i in enumerate(idx):
        for r in records_by_person[person_ids[i]]:
            resampled.append(
                type(r)(
                    person_id=f"b{j:05d}",
                    task_id=r.task_id,
                    events=r.events,
                    truncated=r.truncated,
                )
            )
    return fit_em(resampled, tasks, init=init, options=options).rho


def correlation_with_ci(fit: FitResult, records, tasks,
                        bootstrap_reps: int = 1000, rng_seed: int = 0,
                        n_jobs: int = 1, refit_points_per_dim: int = 11,
                        refit_loglik_tol: float = 1e-3) -> CorrelationCI:
    """Trait correlation with a percentile bootstrap CI.

    Persons are resampled with replacement; each resample is refit by
    EM warm-started at the original estimates. The refits run without
    polish and with the given node count and tolerance: at the defaults
    a refit's rho differs from its fully converged value by under 1e-3,
    two orders below the person-resampling spread the interval measures.
    Failed refits are dropped; more than 10% failures flags the interval.
    """
    if bootstrap_reps < 2:
        raise ValueError("bootstrap_reps must be at least 2")
    tasks = normalize_tasks(tasks)
    records, _ = usable_records(records, tasks)
    by_person = {}
    for r in records:
        by_person.setdefault(r.person_id, []).append(r)
    person_ids = list(by_person)
    seeds = np.random.SeedSequence(rng_seed).spawn(bootstrap_reps)
    refit_options = FitOptions(
        points_per_dim=refit_points_per_dim,
        loglik_tol=refit_loglik_tol,
        polish=False,
        compute_se=False,
    )

    def one(seed):
        try:
            return _bootstrap_rho(
                by_person, person_ids, tasks, fit.params, refit_options, seed
            )
        except EstimationError:
            return None

    results = Parallel(n_jobs=n_jobs)(delayed(one)(s) for s in seeds)
    rhos = np.array([r for r in results if r is not None])
    failed = bootstrap_reps - len(rhos)
    if len(rhos) < 2:
        raise EstimationError("bootstrap failed: fewer than 2 successful refits")
    lower, upper = np.percentile(rhos, [2.5, 97.5])
    note = ""
    if failed > 0.10 * bootstrap_reps:
        note = f"{failed}/{bootstrap_reps} bootstrap refits failed"
    return CorrelationCI(
        rho=fit.rho,
        lower=float(lower),
        upper=float(upper),
        num_reps=bootstrap_reps,
        num_failed=failed,
        note=note,
    )
