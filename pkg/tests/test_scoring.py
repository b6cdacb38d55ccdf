"""Person scoring: posterior means, spreads, and modes."""

import math

import numpy as np
import pytest
from scipy import stats

from ctdc.estimate import FixedParams
from ctdc.likelihood import TraitPair, conditional_log_likelihood
from ctdc.quadrature import gauss_hermite_2d
from ctdc.records import ProcessRecord
from ctdc.scoring import score_eap, score_map
from ctdc.tasks import parse_task

# one uniform choice then one timed uniform choice: the marks carry no
# competency information at all
BLIND_TASK = parse_task("""
task_id: blind
states:
  - {id: 1, end: 0}
  - {id: 2, end: 0}
  - {id: 3, end: 1}
  - {id: 4, end: 1}
  - {id: 5, end: 1}
initial_state: 1
terminal_states: [3, 4, 5]
knowledge_statuses: [only]
initial_status: only
status_triggers: []
moves:
  - {state: 1, effective: [], ineffective: [2, 3]}
  - {state: 2, effective: [], ineffective: [4, 5]}
""", "blind.yaml")


def chain_task(n=100):
    lines = ["task_id: chain", "states:"]
    for i in range(1, n + 1):
        lines.append(f"  - {{id: {i}, end: {1 if i == n else 0}}}")
    lines += [f"initial_state: 1", f"terminal_states: [{n}]",
              "knowledge_statuses: [only]", "initial_status: only",
              "status_triggers: []", "moves:"]
    for i in range(1, n):
        ineff = f"[{i - 1}]" if i > 1 else "[]"
        lines.append(
            f"  - {{state: {i}, effective: [{i + 1}], ineffective: {ineff}}}")
    lines += ["success:", f"  final_state: {n}", f"  from_states: [{n - 1}]"]
    return parse_task("\n".join(lines), "chain.yaml")


def test_unscored_person_gets_the_prior(diag_params):
    rec = ProcessRecord(person_id="seen", task_id="blind",
                        events=((1.0, 2), (3.0, 4)))
    wrong_tasks = FixedParams(betas=(0.5,), gammas=(-1.0,),
                              sigma=diag_params.sigma)
    out = score_eap([rec], [BLIND_TASK], wrong_tasks,
                    person_ids=["seen", "ghost"])
    ghost = {e.person_id: e for e in out}["ghost"]
    assert (ghost.eap.theta, ghost.eap.tau) == (0.0, 0.0)
    assert ghost.posterior_sd[0] == pytest.approx(math.sqrt(2.0), rel=1e-12)
    assert ghost.posterior_sd[1] == pytest.approx(math.sqrt(0.1), rel=1e-12)


def test_uninformative_marks_leave_theta_at_the_prior():
    # diagonal prior: flat-in-theta records must return exactly the
    # theta prior, while the one observed gap still moves tau
    params = FixedParams(betas=(0.5,), gammas=(-1.0,),
                         sigma=np.array([[2.0, 0.0], [0.0, 0.1]]))
    rec = ProcessRecord(person_id="p", task_id="blind",
                        events=((1.0, 2), (3.0, 4)))
    est = score_eap([rec], [BLIND_TASK], params)[0]
    assert est.eap.theta == pytest.approx(0.0, abs=1e-10)
    assert est.posterior_sd[0] == pytest.approx(math.sqrt(2.0), rel=1e-8)
    assert abs(est.eap.tau) > 1e-4
    assert est.posterior_sd[1] < math.sqrt(0.1)


def test_correlated_prior_lets_timing_inform_theta():
    params = FixedParams(betas=(0.5,), gammas=(-1.0,),
                         sigma=np.array([[2.0, 0.35], [0.35, 0.1]]))
    fast = ProcessRecord(person_id="p", task_id="blind",
                         events=((1.0, 2), (1.2, 4)))
    est = score_eap([fast], [BLIND_TASK], params)[0]
    # fast actions pull tau up; the positive covariance drags theta along
    assert est.eap.tau > 0.05
    assert est.eap.theta > 0.01


def test_posterior_contracts_for_scored_persons(small_cohort, tasks,
                                                reference_params):
    records, _ = small_cohort
    prior_sd = np.sqrt(np.diag(reference_params.sigma))
    for est in score_eap(records, tasks, reference_params):
        assert est.posterior_sd[0] < prior_sd[0]
        assert est.posterior_sd[1] < prior_sd[1]


def test_eap_tracks_truth_on_a_cohort(small_cohort, tasks,
                                      reference_params):
    records, truths = small_cohort
    ests = score_eap(records, tasks, reference_params)
    theta_hat = np.array([e.eap.theta for e in ests])
    theta_true = np.array([truths[e.person_id].theta for e in ests])
    tau_hat = np.array([e.eap.tau for e in ests])
    tau_true = np.array([truths[e.person_id].tau for e in ests])
    assert np.corrcoef(theta_hat, theta_true)[0, 1] > 0.75
    assert np.corrcoef(tau_hat, tau_true)[0, 1] > 0.7
    # shrinkage: posterior means are less spread than the prior draws
    assert theta_hat.std() < theta_true.std()


def test_long_chain_record_scores_stably():
    # 99 fast steps put the posterior far from the prior and make it
    # very tight; integration must stay finite and accurate
    task = chain_task(100)
    params = FixedParams(betas=(1.5,), gammas=(-1.7,),
                         sigma=np.array([[1.0, 0.2], [0.2, 0.5]]))
    rec = ProcessRecord(person_id="hero", task_id="chain",
                        events=tuple((0.05 * j, j + 1) for j in range(1, 100)))
    est = score_eap([rec], [task], params, include_map=True)[0]
    assert np.isfinite([est.eap.theta, est.eap.tau]).all()
    # 99 gaps of 0.05 s pin the rate near 20/s: tau ~ log(20) - gamma
    assert est.eap.tau == pytest.approx(math.log(20.0) + 1.7, abs=0.3)
    assert est.posterior_sd[1] < 0.15
    finer = score_eap([rec], [task], params, points_per_dim=81)[0]
    assert est.eap.theta == pytest.approx(finer.eap.theta, abs=1e-8)
    assert est.eap.tau == pytest.approx(finer.eap.tau, abs=1e-8)


def test_map_maximizes_the_posterior(small_cohort, tasks, reference_params):
    records, _ = small_cohort
    pid = records[0].person_id
    recs = [r for r in records if r.person_id == pid]
    mode = score_map(recs, tasks, reference_params)
    prior = stats.multivariate_normal(mean=[0, 0], cov=reference_params.sigma)
    task_index = {t.task_id: k for k, t in enumerate(tasks)}

    def log_post(theta, tau):
        tr = TraitPair(theta, tau)
        ll = sum(conditional_log_likelihood(
            r, tasks[task_index[r.task_id]], tr,
            reference_params.task_params(task_index[r.task_id]))
            for r in recs)
        return ll + prior.logpdf([theta, tau])

    center = log_post(mode.theta, mode.tau)
    for dt, du in [(1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3)]:
        assert log_post(mode.theta + dt, mode.tau + du) <= center + 1e-10


def test_map_agrees_between_entry_points(small_cohort, tasks,
                                         reference_params):
    records, _ = small_cohort
    pid = records[0].person_id
    recs = [r for r in records if r.person_id == pid]
    direct = score_map(recs, tasks, reference_params)
    via_eap = score_eap(recs, tasks, reference_params,
                        include_map=True)[0].map_estimate
    assert direct.theta == pytest.approx(via_eap.theta, abs=1e-8)
    assert direct.tau == pytest.approx(via_eap.tau, abs=1e-8)


def test_zero_covariance_scores_collapse_to_the_origin(small_cohort, tasks,
                                                       reference_params):
    records, _ = small_cohort
    params = FixedParams(betas=reference_params.betas,
                         gammas=reference_params.gammas,
                         sigma=np.zeros((2, 2)))
    ests = score_eap(records, tasks, params, include_map=True)
    for est in ests[:5]:
        assert (est.eap.theta, est.eap.tau) == (0.0, 0.0)
        assert est.posterior_sd == (0.0, 0.0)
        assert (est.map_estimate.theta, est.map_estimate.tau) == (0.0, 0.0)


def test_explicit_grid_override_is_respected(small_cohort, tasks,
                                             reference_params):
    records, _ = small_cohort
    grid = gauss_hermite_2d(reference_params.sigma, 61)
    on_grid = score_eap(records, tasks, reference_params, grid=grid)
    adaptive = score_eap(records, tasks, reference_params)
    # the shared grid is coarser for tight posteriors but must agree
    # for ordinary ones; compare medians over the cohort
    d_theta = np.median([abs(a.eap.theta - g.eap.theta)
                         for a, g in zip(adaptive, on_grid)])
    assert d_theta < 1e-4


def test_roster_must_cover_scored_persons(small_cohort, tasks,
                                          reference_params):
    records, _ = small_cohort
    with pytest.raises(ValueError):
        score_eap(records, tasks, reference_params, person_ids=["p01"])


def test_score_map_rejects_mixed_persons(small_cohort, tasks,
                                         reference_params):
    records, _ = small_cohort
    with pytest.raises(ValueError):
        score_map(records, tasks, reference_params)
