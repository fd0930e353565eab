"""Maximum-likelihood estimation of symmetric ANMs from pooled regimes.

Each record contributes the Gaussian density of the residuals of its
non-intervened variables (treatments that were not set, plus the outcome).
With the noise covariance held fixed the log-likelihood is quadratic in the
structural coefficients, so the coefficient step is a generalized
least-squares problem; with the coefficients held fixed the covariance is
re-estimated from the masked residuals. :func:`fit` alternates the two.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import InvalidDataError, OptimizationError, UnderdeterminedError
from .gaussian import check_cov, mle_cov
from .model import Dataset, PolyBasis, StructuralEq, SymmetricAnm, features

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class FitOptions:
    lr: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_outer: int = 50
    max_inner: int = 5000
    tol: float = 1e-6
    grad_tol: float = 1e-9
    var_floor: float = 1e-6
    em_steps: int = 1
    solver: str = "exact"
    mode: str = "joint"
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0 or self.lr <= 0 or self.grad_tol <= 0:
            raise ValueError("tolerances and learning rate must be positive")
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError("Adam decay coefficients must lie in (0, 1)")
        if self.solver not in ("exact", "adam"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.mode not in ("joint", "marginal"):
            raise ValueError(f"unknown likelihood mode {self.mode!r}")


def equation_names(K: int) -> list[str]:
    return [f"x{i}" for i in range(K)] + ["y"]


# --- design -------------------------------------------------------------------

@dataclass
class Design:
    """Per-equation feature matrices, targets and presence masks."""

    phis: list
    targets: np.ndarray  # n x (K+1)
    mask: np.ndarray  # n x (K+1), True where the variable was not intervened

    @property
    def sizes(self) -> list[int]:
        return [p.shape[1] for p in self.phis]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    def split(self, flat) -> list[np.ndarray]:
        return np.split(np.asarray(flat, dtype=float), np.cumsum(self.sizes)[:-1])

    def residuals(self, theta) -> np.ndarray:
        r = np.column_stack([t - phi @ th for t, phi, th in
                             zip(self.targets.T, self.phis, theta)])
        return np.where(self.mask, r, 0.0)

    @cached_property
    def _groups(self):
        pats, inv = np.unique(self.mask, axis=0, return_inverse=True)
        inv = np.asarray(inv).reshape(-1)
        return [(np.flatnonzero(inv == g), np.flatnonzero(pat)) for g, pat in enumerate(pats)]

    def groups(self):
        """``(rows, slots)`` for each distinct presence pattern."""
        return self._groups

    @cached_property
    def _cross(self):
        # per group: Phi_v' Phi_w and Phi_v' t_w blocks over present slots
        out = []
        for rows, slots in self._groups:
            ph = [self.phis[v][rows] for v in slots]
            t = self.targets[np.ix_(rows, slots)]
            gram = [[a.T @ b for b in ph] for a in ph]
            rhs = [[a.T @ t[:, c] for c in range(len(slots))] for a in ph]
            out.append((slots, gram, rhs))
        return out


def design(data: Dataset) -> Design:
    if data.n == 0:
        raise InvalidDataError("dataset is empty")
    K = data.K
    phi_c = features(PolyBasis(data.covariate_dim), data.C)
    phi_y = features(PolyBasis(data.covariate_dim + K), np.hstack([data.C, data.X]))
    targets = np.column_stack([data.X, data.Y])
    mask = np.column_stack([~data.intervened, np.ones(data.n, dtype=bool)])
    return Design([phi_c] * K + [phi_y], targets, mask)


def _check_theta(d: Design, theta) -> list[np.ndarray]:
    theta = [np.asarray(t, dtype=float) for t in theta]
    if [t.shape for t in theta] != [(s,) for s in d.sizes]:
        raise ValueError(f"theta shapes {[t.shape for t in theta]} do not match {d.sizes}")
    return theta


def _whitener(sigma: np.ndarray, slots, floor: float, mode: str):
    """``W`` with ``W @ W.T`` the precision on ``slots``, and the log-determinant."""
    sub = sigma[np.ix_(slots, slots)]
    if mode == "marginal":
        v = np.maximum(np.diag(sub), floor)
        return np.diag(1.0 / np.sqrt(v)), float(np.sum(np.log(v)))
    w, V = np.linalg.eigh(0.5 * (sub + sub.T))
    w = np.maximum(w, floor)
    return V / np.sqrt(w), float(np.sum(np.log(w)))


def _precision(sigma: np.ndarray, slots, floor: float, mode: str):
    W, logdet = _whitener(sigma, slots, floor, mode)
    return W @ W.T, logdet


# --- likelihood ---------------------------------------------------------------

def log_likelihood(data: Dataset, theta, sigma, *, var_floor: float = 1e-6,
                   mode: str = "joint") -> float:
    """Pooled log-likelihood over all records and their non-intervened variables.

    ``mode="joint"`` scores each record's residual subvector under the
    corresponding principal submatrix of ``sigma``; ``mode="marginal"``
    multiplies univariate densities with the diagonal variances only.
    Eigenvalues (joint) or variances (marginal) are floored at ``var_floor``.
    """
    d = design(data)
    return _loglik(d, _check_theta(d, theta), check_cov(sigma), var_floor, mode)


def _loglik(d: Design, theta, sigma, var_floor, mode) -> float:
    R = d.residuals(theta)
    bad = np.argwhere(~np.isfinite(R))
    if bad.size:
        raise InvalidDataError("non-finite residual", int(bad[0][0]))
    total = 0.0
    for rows, slots in d.groups():
        W, logdet = _whitener(sigma, slots, var_floor, mode)
        z = R[np.ix_(rows, slots)] @ W
        quad = float(np.sum(z * z))
        total += -0.5 * quad - 0.5 * len(rows) * (len(slots) * LOG_2PI + logdet)
    return float(total)


def _weighted_residuals(d: Design, theta, sigma, var_floor, mode) -> np.ndarray:
    # W[r, v] = (P_S r_S)_v for v in S, 0 otherwise
    R = d.residuals(theta)
    W = np.zeros_like(R)
    for rows, slots in d.groups():
        P, _ = _precision(sigma, slots, var_floor, mode)
        W[np.ix_(rows, slots)] = R[np.ix_(rows, slots)] @ P
    return W


def gradient(data: Dataset, theta, sigma, *, var_floor: float = 1e-6,
             mode: str = "joint") -> list[np.ndarray]:
    """Gradient of :func:`log_likelihood` with respect to each equation's theta."""
    d = design(data)
    theta = _check_theta(d, theta)
    W = _weighted_residuals(d, theta, check_cov(sigma), var_floor, mode)
    return [phi.T @ W[:, v] for v, phi in enumerate(d.phis)]


def normal_equations(d: Design, sigma, var_floor: float = 1e-6, mode: str = "joint"):
    """``(A, b)`` such that the log-likelihood is ``-x'Ax/2 + b'x + const``."""
    offs = d.offsets
    A = np.zeros((offs[-1], offs[-1]))
    b = np.zeros(offs[-1])
    for slots, gram, rhs in d._cross:
        P, _ = _precision(sigma, slots, var_floor, mode)
        for a, v in enumerate(slots):
            sv = slice(offs[v], offs[v + 1])
            for c, w in enumerate(slots):
                if P[a, c] != 0.0:
                    A[sv, offs[w]:offs[w + 1]] += P[a, c] * gram[a][c]
                    b[sv] += P[a, c] * rhs[a][c]
    return A, b


# --- theta step ---------------------------------------------------------------

def closed_form_theta(data: Dataset, sigma=None, *, ridge: float = 1e-8,
                      var_floor: float = 1e-6, mode: str = "joint") -> list[np.ndarray]:
    """Exact maximizer of the log-likelihood in theta for a fixed covariance.

    With ``sigma=None`` (identity) this is ordinary least squares per
    equation over the records where that variable was not intervened. Every
    equation's design must have full column rank.
    """
    d = design(data)
    K = data.K
    for v, name in enumerate(equation_names(K)):
        phi = d.phis[v][d.mask[:, v]]
        rank = np.linalg.matrix_rank(phi) if len(phi) else 0
        if rank < phi.shape[1]:
            raise UnderdeterminedError(name, rank, phi.shape[1])
    sigma = np.eye(K + 1) if sigma is None else check_cov(sigma)
    A, b = normal_equations(d, sigma, var_floor, mode)
    return d.split(np.linalg.solve(A + ridge * np.eye(len(b)), b))


def _solve_min_norm(A, b):
    # Minimum-norm maximizer; rows/cols of unfitted equations are all zero.
    return np.linalg.lstsq(A, b, rcond=1e-12)[0]


@dataclass
class ThetaFit:
    theta: list
    steps: int
    grad_norm: float
    unfitted: list = field(default_factory=list)


def fit_theta(data: Dataset, sigma, opts: FitOptions = FitOptions(), theta0=None) -> ThetaFit:
    """Maximize the log-likelihood over theta by Adam with ``sigma`` frozen.

    The objective is scaled by ``1/n``. Stops once the gradient norm drops
    below ``opts.grad_tol`` or after ``opts.max_inner`` steps. Equations with
    no non-intervened records get no gradient and keep their starting value;
    they are listed in ``ThetaFit.unfitted``. Raises :class:`OptimizationError`
    if the objective goes non-finite, or falls for 50 consecutive steps to
    below its starting value.
    """
    d = design(data)
    sigma = check_cov(sigma)
    A, b = normal_equations(d, sigma, opts.var_floor, opts.mode)
    A /= d.targets.shape[0]
    b /= d.targets.shape[0]
    x = np.zeros(len(b)) if theta0 is None else np.concatenate(_check_theta(d, theta0))
    names = equation_names(data.K)
    unfitted = [names[v] for v in range(len(names)) if not d.mask[:, v].any()]

    def objective(x):
        with np.errstate(over="ignore", invalid="ignore"):
            return -0.5 * x @ A @ x + b @ x

    b1, b2 = opts.betas
    m = np.zeros_like(x)
    s = np.zeros_like(x)
    f_prev = objective(x)
    worse = 0
    trace = [f_prev]
    gnorm = float("inf")
    step = 0
    for step in range(1, opts.max_inner + 1):
        g = b - A @ x
        gnorm = float(np.linalg.norm(g))
        if gnorm < opts.grad_tol:
            step -= 1
            break
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * g * g
        mhat = m / (1 - b1 ** step)
        shat = s / (1 - b2 ** step)
        x = x + opts.lr * mhat / (np.sqrt(shat) + opts.eps)
        f = objective(x)
        trace.append(f)
        worse = worse + 1 if f < f_prev else 0
        # jitter near the optimum also produces runs of small decreases; only a
        # run that has fallen below the starting value counts as divergence
        if not np.isfinite(f) or (worse >= 50 and f < trace[0]):
            raise OptimizationError("Adam diverged", trace)
        f_prev = f
    if unfitted:
        log.warning("no data for equations %s; left at initialization", unfitted)
    return ThetaFit(d.split(x), step, gnorm, unfitted)


# --- sigma step ---------------------------------------------------------------

def fit_sigma(data: Dataset, theta, sigma0=None, em_steps: int = 1) -> np.ndarray:
    """Noise covariance from the residuals of non-intervened cells.

    Without ``sigma0`` this is the pairwise-complete estimate of
    :func:`~disentangle.gaussian.mle_cov`. With ``sigma0`` it instead takes
    ``em_steps`` EM steps from ``sigma0`` toward the maximum-likelihood
    covariance of the partially observed residual table; each step does not
    decrease the likelihood.
    """
    d = design(data)
    R = d.residuals(_check_theta(d, theta))
    if sigma0 is None:
        return mle_cov(R, d.mask)
    sigma = check_cov(sigma0)
    for _ in range(em_steps):
        sigma = em_step(d, R, sigma)
    return sigma


def em_step(d: Design, R: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """One EM update of the covariance for a residual table with missing cells.

    Missing cells are replaced by their conditional means given the present
    ones, and the conditional covariance of the missing block is added back.
    """
    n, p = R.shape
    S = np.zeros((p, p))
    scale = max(float(np.trace(sigma)) / p, 1e-300)
    for rows, slots in d.groups():
        miss = np.setdiff1d(np.arange(p), slots)
        U = np.zeros((len(rows), p))
        U[:, slots] = R[np.ix_(rows, slots)]
        if miss.size:
            soo = sigma[np.ix_(slots, slots)] + 1e-12 * scale * np.eye(len(slots))
            som = sigma[np.ix_(slots, miss)]
            B = np.linalg.solve(soo, som).T
            U[:, miss] = U[:, slots] @ B.T
            S[np.ix_(miss, miss)] += len(rows) * (sigma[np.ix_(miss, miss)] - B @ som)
        S += U.T @ U
    S /= n
    return 0.5 * (S + S.T)


# --- full procedure -----------------------------------------------------------

@dataclass
class FitReport:
    theta: list
    sigma: np.ndarray
    ll_trace: list
    converged: bool
    iterations: int
    covariate_dim: int
    unfitted: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.theta) - 1

    @property
    def treatment_eqs(self) -> tuple:
        b = PolyBasis(self.covariate_dim)
        return tuple(StructuralEq(b, t) for t in self.theta[:-1])

    @property
    def outcome_eq(self) -> StructuralEq:
        return StructuralEq(PolyBasis(self.covariate_dim + self.K), self.theta[-1])

    def treatment_means(self, C) -> np.ndarray:
        C = np.atleast_2d(C)
        return np.column_stack([f(C) for f in self.treatment_eqs]) if self.K else \
            np.zeros((len(C), 0))

    def outcome_mean(self, C, X) -> np.ndarray:
        return self.outcome_eq(np.hstack([np.atleast_2d(C), np.atleast_2d(X)]))

    def as_scm(self, covariate_law) -> SymmetricAnm:
        return SymmetricAnm(self.treatment_eqs, self.outcome_eq, self.sigma, covariate_law)

    @classmethod
    def from_scm(cls, scm: SymmetricAnm) -> "FitReport":
        """Wrap a known model so inference can run against the ground truth."""
        theta = [e.theta.copy() for e in scm.treatment_eqs] + [scm.outcome_eq.theta.copy()]
        return cls(theta, np.array(scm.sigma), [], True, 0, scm.covariate_dim)

    def to_json(self) -> dict:
        names = equation_names(self.K)
        return {
            "K": self.K,
            "covariate_dim": self.covariate_dim,
            "theta": {n: np.asarray(t).tolist() for n, t in zip(names, self.theta)},
            "sigma": np.asarray(self.sigma).ravel().tolist(),
            "ll_trace": list(map(float, self.ll_trace)),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "unfitted": list(self.unfitted),
        }

    @classmethod
    def from_json(cls, doc) -> "FitReport":
        K = int(doc["K"])
        theta = [np.array(doc["theta"][n], dtype=float) for n in equation_names(K)]
        sigma = np.array(doc["sigma"], dtype=float).reshape(K + 1, K + 1)
        return cls(theta, sigma, list(doc.get("ll_trace", [])), bool(doc.get("converged", True)),
                   int(doc.get("iterations", 0)), int(doc["covariate_dim"]),
                   list(doc.get("unfitted", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FitReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def _theta_step(d: Design, data, sigma, opts: FitOptions, theta):
    if opts.solver == "adam":
        tf = fit_theta(data, sigma, opts, theta0=theta)
        return tf.theta, tf.unfitted
    A, b = normal_equations(d, sigma, opts.var_floor, opts.mode)
    names = equation_names(data.K)
    unfitted = [names[v] for v in range(len(names)) if not d.mask[:, v].any()]
    return d.split(_solve_min_norm(A, b)), unfitted


def fit(data: Dataset, opts: FitOptions = FitOptions()) -> FitReport:
    """Alternate theta and covariance steps until the log-likelihood settles.

    Starts from zero coefficients and an identity covariance. The first
    covariance estimate is the pairwise-complete one; later iterations take
    ``opts.em_steps`` EM steps from the previous estimate, so the recorded
    log-likelihood never decreases. Stops when the absolute change between
    outer iterations falls below ``opts.tol``; otherwise returns after
    ``opts.max_outer`` iterations with ``converged=False``.
    """
    d = design(data)
    K = data.K
    theta = [np.zeros(s) for s in d.sizes]
    sigma = np.eye(K + 1)
    trace: list[float] = []
    converged = False
    unfitted: list = []
    it = 0
    for it in range(1, opts.max_outer + 1):
        theta, unfitted = _theta_step(d, data, sigma, opts, theta)
        R = d.residuals(theta)
        if it == 1:
            sigma = mle_cov(R, d.mask)
        else:
            for _ in range(opts.em_steps):
                sigma = em_step(d, R, sigma)
        trace.append(_loglik(d, theta, sigma, opts.var_floor, opts.mode))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < opts.tol:
            converged = True
            break
    log.debug("fit: %d outer iterations, ll=%.10g, converged=%s", it, trace[-1], converged)
    return FitReport(theta, sigma, trace, converged, it, data.covariate_dim, unfitted)


def fit_baseline(data: Dataset) -> np.ndarray:
    """Pooled least squares of Y on the outcome features, ignoring regimes."""
    if data.n == 0:
        raise InvalidDataError("dataset is empty")
    phi = features(PolyBasis(data.covariate_dim + data.K), np.hstack([data.C, data.X]))
    rank = np.linalg.matrix_rank(phi)
    if rank < phi.shape[1]:
        raise UnderdeterminedError("y", rank, phi.shape[1])
    A = phi.T @ phi + 1e-8 * np.eye(phi.shape[1])
    return np.linalg.solve(A, phi.T @ data.Y)


def baseline_report(data: Dataset, theta_y) -> FitReport:
    """A report whose predictions are the baseline's ``f_Y`` with no correction."""
    b = PolyBasis(data.covariate_dim)
    theta = [np.zeros(b.dim) for _ in range(data.K)] + [np.asarray(theta_y, dtype=float)]
    return FitReport(theta, np.eye(data.K + 1), [], True, 0, data.covariate_dim)
