"""Estimator object wrapping fit/score in the scikit-learn idiom."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .estimate import (FitOptions, fit_em, marginal_log_likelihood,
                       normalize_tasks, usable_records)
from .scoring import score_eap


class CTDCModel(BaseEstimator):
    """Latent-trait measurement model for problem-solving process logs.

    fit() estimates the per-task (beta, gamma) and the trait covariance
    from a list of ProcessRecords; transform()/predict() map records to
    EAP trait estimates. `tasks` may hold TaskDefinitions or builtin
    task ids.
    """

    def __init__(self, tasks=("tickets-task1", "tickets-task2"),
                 points_per_dim=21, max_iters=500, loglik_tol=1e-6,
                 param_tol=0.0, polish=True, compute_se=True,
                 scoring_points_per_dim=41):
        self.tasks = tasks
        self.points_per_dim = points_per_dim
        self.max_iters = max_iters
        self.loglik_tol = loglik_tol
        self.param_tol = param_tol
        self.polish = polish
        self.compute_se = compute_se
        self.scoring_points_per_dim = scoring_points_per_dim

    def _options(self):
        return FitOptions(
            points_per_dim=self.points_per_dim,
            max_iters=self.max_iters,
            loglik_tol=self.loglik_tol,
            param_tol=self.param_tol,
            polish=self.polish,
            compute_se=self.compute_se,
        )

    def fit(self, records, y=None):
        """Fit by maximum marginal likelihood; returns self."""
        tasks = normalize_tasks(self.tasks)
        result = fit_em(records, tasks, options=self._options())
        self.tasks_ = tasks
        self.result_ = result
        self.params_ = result.params
        self.std_errors_ = result.std_errors
        self.converged_ = result.converged
        self.n_persons_ = len(result.person_ids)
        return self

    def predict_estimates(self, records, include_map=False, person_ids=None):
        """Trait estimates (list of TraitEstimate) for persons in records."""
        check_is_fitted(self, "params_")
        return score_eap(
            records, self.tasks_, self.params_,
            points_per_dim=self.scoring_points_per_dim,
            person_ids=person_ids, include_map=include_map,
        )

    def transform(self, records):
        """EAP traits as an (n_persons, 2) array of (theta, tau) rows."""
        estimates = self.predict_estimates(records)
        return np.array([[e.eap.theta, e.eap.tau] for e in estimates])

    def predict(self, records):
        return self.transform(records)

    def score(self, records):
        """Mean marginal log-likelihood per person (higher is better)."""
        check_is_fitted(self, "params_")
        usable, _ = usable_records(records, self.tasks_)
        persons = {r.person_id for r in usable}
        total = marginal_log_likelihood(
            usable, self.tasks_, self.params_,
            points_per_dim=self.points_per_dim,
        )
        return total / max(len(persons), 1)
