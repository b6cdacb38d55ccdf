"""OLS validation harness: criterion regressions and R-squared comparisons."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import SchemaError


@dataclass
class RegressionResult:
    names: tuple
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    r_squared: float
    n: int


def _design(X, add_intercept):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if add_intercept:
        X = np.column_stack([np.ones(len(X)), X])
    return X


def ols(y, X, names=None, add_intercept: bool = True) -> RegressionResult:
    """Least squares with classical standard errors and t-based p-values.

    X holds the covariate columns; an intercept column is prepended
    unless add_intercept is False. Raises ValueError on rank-deficient
    designs or when there are no residual degrees of freedom.
    """
    y = np.asarray(y, dtype=float)
    X = _design(X, add_intercept)
    n, p = X.shape
    if len(y) != n:
        raise ValueError(f"y has {len(y)} rows, X has {n}")
    if n <= p:
        raise ValueError(f"need more than {p} observations, got {n}")
    if np.linalg.matrix_rank(X) < p:
        raise ValueError("design matrix is rank deficient")
    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    rss = float(resid @ resid)
    tss = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - rss / tss if tss > 0 else 0.0
    dof = n - p
    s2 = rss / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / se, np.inf * np.sign(coef))
    pvals = 2.0 * stats.t.sf(np.abs(t), dof)
    if names is None:
        names = [f"x{j}" for j in range(1, X.shape[1] + (0 if add_intercept else 1))]
    full_names = (["intercept"] if add_intercept else []) + list(names)
    return RegressionResult(
        names=tuple(full_names),
        coef=coef,
        se=se,
        t=t,
        p=pvals,
        r_squared=float(r_squared),
        n=n,
    )


def _r2(y, X):
    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    tss = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(resid @ resid) / tss if tss > 0 else 0.0


@dataclass
class R2Difference:
    delta: float
    lower: float
    upper: float
    num_reps: int
    num_skipped: int


def r2_difference_ci(y, x_a, x_b, bootstrap_reps: int = 1000,
                     rng_seed: int = 0, resample_fn=None) -> R2Difference:
    """R-squared difference R2(a) - R2(b) with a percentile bootstrap CI.

    Rows (persons) are resampled with replacement; both regressions are
    refit per resample. resample_fn, when given, maps an index array of
    resampled persons to (y, x_a, x_b) for that resample, letting the
    caller rebuild covariates from scratch (e.g. refit the measurement
    model) instead of reusing the original rows. Rank-deficient
    resamples are skipped; more than 10% skipped is an error.
    """
    y = np.asarray(y, dtype=float)
    A = _design(x_a, add_intercept=True)
    B = _design(x_b, add_intercept=True)
    if len(y) != len(A) or len(y) != len(B):
        raise ValueError("y and both designs must have equal row counts")
    for M, label in ((A, "a"), (B, "b")):
        if np.linalg.matrix_rank(M) < M.shape[1]:
            raise ValueError(f"model {label} design is rank deficient")
    delta = _r2(y, A) - _r2(y, B)
    rng = np.random.default_rng(rng_seed)
    n = len(y)
    deltas = []
    skipped = 0
    for _ in range(bootstrap_reps):
        idx = rng.integers(0, n, n)
        if resample_fn is None:
            Ab, Bb, yb = A[idx], B[idx], y[idx]
        else:
            yb, xab, xbb = resample_fn(idx)
            yb = np.asarray(yb, dtype=float)
            Ab = _design(xab, add_intercept=True)
            Bb = _design(xbb, add_intercept=True)
        if (np.linalg.matrix_rank(Ab) < Ab.shape[1]
                or np.linalg.matrix_rank(Bb) < Bb.shape[1]):
            skipped += 1
            continue
        deltas.append(_r2(yb, Ab) - _r2(yb, Bb))
    if skipped > 0.10 * bootstrap_reps:
        raise ValueError(
            f"{skipped}/{bootstrap_reps} bootstrap resamples were rank "
            f"deficient"
        )
    lower, upper = np.percentile(deltas, [2.5, 97.5])
    return R2Difference(
        delta=float(delta),
        lower=float(lower),
        upper=float(upper),
        num_reps=bootstrap_reps,
        num_skipped=skipped,
    )


MODEL_NAMES = ("M1", "M2", "M3", "M4", "M5", "M6", "M7", "M8")
DELTA_PAIRS = (("M3", "M4"), ("M3", "M5"), ("M4", "M6"), ("M5", "M7"),
               ("M3", "M8"))


@dataclass
class DeltaEntry:
    label: str
    delta: float
    lower: float
    upper: float


@dataclass
class ValidationSuite:
    n: int
    r_squared: dict
    results: dict
    deltas: list


def _pair(value):
    if hasattr(value, "theta"):
        return float(value.theta), float(value.tau)
    a, b = value
    return float(a), float(b)


def run_validation_suite(criterion, scores_joint, scores_task1, scores_task2,
                         outcomes, bootstrap_reps: int = 1000,
                         rng_seed: int = 0) -> ValidationSuite:
    """Regressions of a criterion on trait estimates and outcomes.

    Inputs are mappings keyed by person id: criterion -> float,
    the three score mappings -> (theta, tau), outcomes -> (binary
    outcome of the first task, binary outcome of the second). All five
    mappings must cover the same persons.

    Models: M1 criterion~theta, M2 ~tau, M3 ~theta+tau (all from the
    joint fit); M4/M5 ~both traits from the task-1-only / task-2-only
    scores; M6/M7 ~single outcomes; M8 ~both outcomes. Percentile
    bootstrap CIs are attached for the R-squared differences M3-M4,
    M3-M5, M4-M6, M5-M7, and M3-M8.
    """
    inputs = {
        "criterion": criterion,
        "joint scores": scores_joint,
        "task-1 scores": scores_task1,
        "task-2 scores": scores_task2,
        "outcomes": outcomes,
    }
    persons = None
    for label, mapping in inputs.items():
        if mapping is None:
            raise SchemaError(f"validation suite is missing {label}")
        keys = set(mapping)
        persons = keys if persons is None else persons
        if keys != persons:
            raise SchemaError(
                f"{label} covers {len(keys)} persons, expected the same "
                f"{len(persons)} persons in every input"
            )
    order = sorted(persons)
    y = np.array([float(criterion[p]) for p in order])
    tj = np.array([_pair(scores_joint[p]) for p in order])
    t1 = np.array([_pair(scores_task1[p]) for p in order])
    t2 = np.array([_pair(scores_task2[p]) for p in order])
    z = np.array([[float(v) for v in outcomes[p]] for p in order])

    designs = {
        "M1": (tj[:, [0]], ["theta"]),
        "M2": (tj[:, [1]], ["tau"]),
        "M3": (tj, ["theta", "tau"]),
        "M4": (t1, ["theta_task1", "tau_task1"]),
        "M5": (t2, ["theta_task2", "tau_task2"]),
        "M6": (z[:, [0]], ["outcome_task1"]),
        "M7": (z[:, [1]], ["outcome_task2"]),
        "M8": (z, ["outcome_task1", "outcome_task2"]),
    }
    results = {}
    r_squared = {}
    for name in MODEL_NAMES:
        X, cols = designs[name]
        res = ols(y, X, names=cols)
        results[name] = res
        r_squared[name] = res.r_squared

    deltas = []
    rng = np.random.default_rng(rng_seed)
    for a, b in DELTA_PAIRS:
        seed = int(rng.integers(0, 2 ** 31 - 1))
        diff = r2_difference_ci(
            y, designs[a][0], designs[b][0],
            bootstrap_reps=bootstrap_reps, rng_seed=seed,
        )
        deltas.append(
            DeltaEntry(
                label=f"{a}-{b}",
                delta=diff.delta,
                lower=diff.lower,
                upper=diff.upper,
            )
        )
    return ValidationSuite(
        n=len(order), r_squared=r_squared, results=results, deltas=deltas
    )
