"""Outcome prediction under arbitrary intervention sets.

The expected outcome with treatments ``X_int`` set by intervention and the
rest observed is ``f_Y(c, x) + E[U_Y | U_obs = x_obs - f_obs(c)]``; the second
term is the Gaussian conditional mean of the outcome noise. Also provides
Monte-Carlo CATE and the two-treatment estimator for a causal chain.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import InvalidDataError, SingularConditioningError
from .estimate import FitReport
from .gaussian import regression_weights
from .model import Dataset, PolyBasis, StructuralEq, features
from .rng import make_rng


@dataclass(frozen=True)
class Query:
    """Covariates plus a value for every treatment, either set or observed."""

    c: tuple
    do: Mapping[int, float] = field(default_factory=dict)
    obs: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "c", tuple(float(v) for v in self.c))
        object.__setattr__(self, "do", {int(k): float(v) for k, v in self.do.items()})
        object.__setattr__(self, "obs", {int(k): float(v) for k, v in self.obs.items()})
        if set(self.do) & set(self.obs):
            raise ValueError("intervened and observed treatments overlap")

    @property
    def K(self) -> int:
        return len(self.do) + len(self.obs)

    def x(self, K: int) -> np.ndarray:
        if set(self.do) | set(self.obs) != set(range(K)):
            raise ValueError(f"query must assign every treatment 0..{K - 1}")
        return np.array([self.do.get(i, self.obs.get(i)) for i in range(K)])

    def to_json(self) -> dict:
        return {"c": list(self.c), "do": {str(k): v for k, v in self.do.items()},
                "obs": {str(k): v for k, v in self.obs.items()}}

    @classmethod
    def from_json(cls, doc) -> "Query":
        return cls(doc.get("c", []), doc.get("do", {}), doc.get("obs", {}))

    @classmethod
    def load(cls, path) -> "Query":
        return cls.from_json(json.loads(Path(path).read_text()))


def correction(fit: FitReport, C, X, observed) -> np.ndarray:
    """``E[U_Y | U_obs]`` at the residuals of the observed treatments (batched)."""
    observed = sorted(observed)
    C = np.atleast_2d(C)
    if not observed:
        return np.zeros(len(C))
    U = np.atleast_2d(X)[:, observed] - fit.treatment_means(C)[:, observed]
    return U @ regression_weights(fit.sigma, fit.K, observed)


def predict_batch(fit: FitReport, C, X, observed, *, corrected: bool = True) -> np.ndarray:
    """Predicted outcomes for rows of ``(C, X)`` sharing one observed set."""
    base = fit.outcome_mean(C, X)
    if not corrected:
        return base
    return base + correction(fit, C, X, observed)


def predict_outcome(fit: FitReport, q: Query, *, corrected: bool = True) -> float:
    if len(q.c) != fit.covariate_dim:
        raise ValueError(f"query has {len(q.c)} covariates, fit expects {fit.covariate_dim}")
    x = q.x(fit.K)
    c = np.array(q.c)
    return float(predict_batch(fit, c[None], x[None], q.obs, corrected=corrected)[0])


def cate(fit: FitReport, c, i: int, x_i: float, n_mc: int = 4096, seed: int = 0) -> float:
    """Monte-Carlo ``E[Y | do(X_i = x_i), C = c]``.

    The other treatments are drawn from their fitted observational law given
    ``c``; each draw is scored with :func:`predict_batch` treating them as
    observed, and the scores are averaged.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    K = fit.K
    if not 0 <= i < K:
        raise ValueError(f"treatment {i} out of range")
    c = np.asarray(c, dtype=float)
    others = [m for m in range(K) if m != i]
    C = np.repeat(c[None], n_mc, axis=0)
    X = np.repeat(fit.treatment_means(c[None]), n_mc, axis=0)
    X[:, i] = x_i
    if others:
        block = fit.sigma[np.ix_(others, others)]
        w, V = np.linalg.eigh(block)
        L = V * np.sqrt(np.clip(w, 0.0, None))
        z = make_rng(seed).standard_normal((n_mc, len(others)))
        X[:, others] += z @ L.T
    return float(np.mean(predict_batch(fit, C, X, others)))


# --- chain of two treatments --------------------------------------------------

@dataclass
class AsymmetricEstimate:
    """Fitted pieces needed for ``E[Y | X_i = x_i, do(X_j = x_j), C = c]``."""

    f_i: StructuralEq
    f_y: StructuralEq
    sigma_ii: float
    sigma_yi: float
    var_floor: float = 1e-10

    def predict(self, c, x_i, x_j) -> float:
        return predict_asymmetric(self, c, x_i, x_j)


def _lstsq(phi, target, name):
    if len(phi) == 0:
        raise InvalidDataError(f"no records for equation {name}")
    rank = np.linalg.matrix_rank(phi)
    if rank < phi.shape[1]:
        from .errors import UnderdeterminedError
        raise UnderdeterminedError(name, rank, phi.shape[1])
    return np.linalg.lstsq(phi, target, rcond=None)[0]


def fit_asymmetric(obs: Dataset, joint: Dataset) -> AsymmetricEstimate:
    """Fit the chain estimator: ``f_i`` and noise moments from observational
    data, ``f_Y`` from records where both treatments were intervened."""
    if obs.n == 0 or joint.n == 0:
        raise InvalidDataError("both regimes need records")
    if obs.intervened.any():
        raise InvalidDataError("obs must be purely observational")
    if not joint.intervened.all():
        raise InvalidDataError("joint must intervene on both treatments in every record")
    m = obs.covariate_dim
    bi, by = PolyBasis(m), PolyBasis(m + 2)
    th_i = _lstsq(features(bi, obs.C), obs.X[:, 0], "x_i")
    th_y = _lstsq(features(by, np.hstack([joint.C, joint.X])), joint.Y, "y")
    f_i, f_y = StructuralEq(bi, th_i), StructuralEq(by, th_y)
    u_i = obs.X[:, 0] - f_i(obs.C)
    u_y = obs.Y - f_y(np.hstack([obs.C, obs.X]))
    return AsymmetricEstimate(f_i, f_y, float(np.mean(u_i * u_i)), float(np.mean(u_y * u_i)))


def predict_asymmetric(est: AsymmetricEstimate, c, x_i: float, x_j: float) -> float:
    """``f_Y(c, x_i, x_j) + (sigma_Yi / sigma_ii) * (x_i - f_i(c))``."""
    c = np.asarray(c, dtype=float).reshape(-1)
    if est.sigma_ii < est.var_floor:
        raise SingularConditioningError((0,))
    base = float(est.f_y(np.concatenate([c, [x_i, x_j]])))
    resid = x_i - float(est.f_i(c))
    return base + est.sigma_yi / est.sigma_ii * resid
