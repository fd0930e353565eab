"""Multivariate-normal utilities for zero-mean noise models.

Sampling (rank-deficient covariances included), Gaussian conditioning,
pairwise-complete covariance estimation from masked residuals, and PSD
repair by shrinkage toward a scaled identity.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import (
    InsufficientOverlapError,
    InvalidCovarianceError,
    SingularConditioningError,
    UnshrinkableError,
)
from .rng import make_rng

SYM_RTOL = 1e-12
PSD_ATOL = 1e-10
COND_RIDGE = 1e-9


def check_cov(sigma, *, name: str = "sigma") -> np.ndarray:
    """Validate a covariance matrix and return it as a float array."""
    s = np.array(sigma, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise InvalidCovarianceError(f"{name} must be square, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise InvalidCovarianceError(f"{name} has non-finite entries")
    scale = max(np.max(np.abs(s)), 1.0) if s.size else 1.0
    if s.size and np.max(np.abs(s - s.T)) > SYM_RTOL * scale:
        raise InvalidCovarianceError(f"{name} is not symmetric")
    if s.size:
        lo = np.linalg.eigvalsh(s).min()
        if lo < -PSD_ATOL * scale:
            raise InvalidCovarianceError(
                f"{name} is indefinite (min eigenvalue {lo:.3g})")
    return s


def psd_factor(sigma: np.ndarray) -> np.ndarray:
    """Return L with L @ L.T == sigma, via eigendecomposition (clamped at 0)."""
    w, v = np.linalg.eigh(sigma)
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample_mvn(sigma, n: int, seed=0, stream=()) -> np.ndarray:
    """Draw ``n`` rows from N(0, sigma).

    ``seed`` may also be a ready ``np.random.Generator``. Degenerate
    covariances are fine: an all-ones sigma yields identical columns.
    """
    s = check_cov(sigma)
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed, *stream)
    z = rng.standard_normal((n, s.shape[0]))
    return z @ psd_factor(s).T


def _solve_given(sigma: np.ndarray, given: Sequence[int]) -> np.ndarray:
    # Inverse of the ridge-regularized principal submatrix.
    g = list(given)
    sub = sigma[np.ix_(g, g)]
    if not np.all(np.isfinite(sub)):
        raise SingularConditioningError(tuple(g))
    mu =float(np.mean(np.diag(sigma))) if sigma.size else 0.0
    ridge = COND_RIDGE * mu
    if ridge <= 0:
        ridge = COND_RIDGE
    sub = sub + ridge * np.eye(len(g))
    try:
        inv = np.linalg.inv(sub)
    except np.linalg.LinAlgError:
        raise SingularConditioningError(tuple(g)) from None
    if not np.all(np.isfinite(inv)) or np.linalg.cond(sub) > 1e15:
        raise SingularConditioningError(tuple(g))
    return inv


def regression_weights(sigma, target: int, given: Sequence[int]) -> np.ndarray:
    """Coefficients b with E[U_target | U_given = u] = b @ u."""
    s = np.asarray(sigma, dtype=float)
    given = list(given)
    if not given:
        return np.zeros(0)
    inv = _solve_given(s, given)
    return s[target, given] @ inv


def cond_expectation(sigma, target: int, given: Sequence[int], u) -> float:
    """Conditional mean of noise coordinate ``target`` given the others equal ``u``."""
    given = list(given)
    if not given:
        raise ValueError("given must be nonempty")
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != len(given):
        raise ValueError(f"u has length {u.shape[-1]}, expected {len(given)}")
    if not np.all(np.isfinite(u)):
        raise ValueError("u must be finite")
    return regression_weights(sigma, target, given) @ u.T


def cond_variance(sigma, target: int, given: Sequence[int]) -> float:
    """Var(U_target | U_given), floored at 0."""
    s = np.asarray(sigma, dtype=float)
    given = list(given)
    v = s[target, target]
    if given:
        v = v - regression_weights(s, target, given) @ s[given, target]
    return max(float(v), 0.0)


def project_psd(a: np.ndarray) -> np.ndarray:
    """Clamp negative eigenvalues of a symmetric matrix at zero."""
    a = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(a)
    if w.min() >= 0:
        return a
    out = (v * np.clip(w, 0.0, None)) @ v.T
    return 0.5 * (out + out.T)


def mle_cov(residuals, mask=None) -> np.ndarray:
    """Zero-mean pairwise-complete covariance estimate, projected to PSD.

    ``mask[r, j]`` is True where cell (r, j) is present. Entry (i, j) is the
    mean of ``u_i * u_j`` over rows where both are present.
    """
    r = np.asarray(residuals, dtype=float)
    if r.ndim != 2:
        raise ValueError("residuals must be 2-D")
    m = np.ones(r.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != r.shape:
        raise ValueError("mask shape does not match residuals")
    if not np.all(np.isfinite(r[m])):
        raise ValueError("present residual cells must be finite")
    rz = np.where(m, r, 0.0)
    mf = m.astype(float)
    counts = mf.T @ mf
    bad = np.argwhere(counts < 2)
    if bad.size:
        i, j = bad[0]
        raise InsufficientOverlapError((int(min(i, j)), int(max(i, j))), int(counts[i, j]))
    return project_psd((rz.T @ rz) / counts)


def psd_shrink(raw, *, min_eig: float = 1e-8, tol: float = 1e-9,
               return_lambda: bool = False):
    """Shrink ``raw`` toward ``mean(diag) * I`` just enough to make it PSD.

    The shrinkage weight is the smallest value (found by bisection to ``tol``)
    giving a minimum eigenvalue of at least ``min_eig``. Already-PSD input
    comes back unchanged with weight 0. With ``return_lambda`` the weight is
    returned alongside the matrix.
    """
    a = np.array(raw, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or not np.all(np.isfinite(a)):
        raise ValueError("raw must be a finite square matrix")
    if np.max(np.abs(a - a.T), initial=0.0) > SYM_RTOL * max(np.max(np.abs(a)), 1.0):
        raise ValueError("raw must be symmetric")
    a = 0.5 * (a + a.T)
    if np.linalg.eigvalsh(a).min() >= 0:
        return (a, 0.0) if return_lambda else a
    mu = float(np.mean(np.diag(a)))
    if mu <= min_eig:
        raise UnshrinkableError(f"mean diagonal {mu:.3g} too small to shrink toward")
    target = mu * np.eye(a.shape[0])

    def mixed(lam):
        return (1.0 - lam) * a + lam * target

    def ok(lam):
        return np.linalg.eigvalsh(mixed(lam)).min() >= min_eig

    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    out = mixed(hi)
    return (out, hi) if return_lambda else out
