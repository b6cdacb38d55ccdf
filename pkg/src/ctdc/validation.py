"""Input validation helpers used at the public API boundaries."""

from __future__ import annotations

import numpy as np


def check_finite_scalar(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


def check_covariance(sigma, name: str = "sigma") -> np.ndarray:
    """Validate a 2x2 positive-semidefinite covariance matrix.

    Returns a symmetrized float copy. Raises ValueError on wrong shape,
    non-finite entries, or negative eigenvalues beyond round-off.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (2, 2):
        raise ValueError(f"{name} must be a 2x2 matrix, got shape {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise ValueError(f"{name} has non-finite entries")
    if abs(sigma[0, 1] - sigma[1, 0]) > 1e-8 * (1.0 + abs(sigma[0, 1])):
        raise ValueError(f"{name} is not symmetric")
    sigma = 0.5 * (sigma + sigma.T)
    eigvals = np.linalg.eigvalsh(sigma)
    if eigvals.min() < -1e-10 * max(1.0, eigvals.max()):
        raise ValueError(f"{name} is not positive semidefinite (eigenvalues {eigvals})")
    return sigma


def psd_factor(sigma: np.ndarray) -> np.ndarray:
    """Lower-triangular factor L with L @ L.T == sigma.

    Uses the Cholesky factor when sigma is positive definite and falls back
    to an eigenvalue-based factor for singular (but PSD) matrices, so that
    degenerate priors such as sigma == 0 are usable throughout.
    """
    sigma = check_covariance(sigma)
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        eigvals, eigvecs = np.linalg.eigh(sigma)
        root = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
        # LQ decomposition of the symmetric root gives a lower-triangular factor.
        q, r = np.linalg.qr(root.T)
        lower = r.T
        signs = np.sign(np.diag(lower))
        signs[signs == 0] = 1.0
        return lower * signs


def check_positive_int(value, name: str) -> int:
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_records(records, tasks_by_id):
    """Check that every record refers to a known task; returns records as a list."""
    records = list(records)
    for record in records:
        if record.task_id not in tasks_by_id:
            raise ValueError(
                f"record for person {record.person_id!r} refers to unknown task "
                f"{record.task_id!r}"
            )
    return records
