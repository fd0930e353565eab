"""Additive-noise structural causal models and data regimes.

Two model shapes are supported:

* :class:`SymmetricAnm` -- K treatments that each depend only on the
  covariates, and an outcome depending on covariates and all treatments.
* :class:`AsymmetricPair` -- two treatments where the second also depends on
  the first.

Noise ``(U_1, ..., U_K, U_Y)`` is zero-mean Gaussian with a full covariance,
drawn independently of the covariates. Structural equations are polynomials
with pairwise interactions (no squares), linear in their coefficients.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidDataError
from .gaussian import check_cov, psd_factor, psd_shrink
from .rng import make_rng

# stream ids under a sampling seed
_S_COV, _S_NOISE, _S_DO = 0, 1, 2


# --- structural equations -------------------------------------------------

@dataclass(frozen=True)
class PolyBasis:
    """Intercept, linear terms and distinct pairwise products of ``arity`` inputs."""

    arity: int

    def __post_init__(self):
        if self.arity < 0:
            raise ValueError("arity must be >= 0")

    @property
    def dim(self) -> int:
        d = self.arity
        return 1 + d + d * (d - 1) // 2

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(combinations(range(self.arity), 2))

    def __call__(self, z) -> np.ndarray:
        return features(self, z)


def features(basis: PolyBasis, z) -> np.ndarray:
    """Feature map ``[1, z_1..z_d, z_1 z_2, ..., z_{d-1} z_d]``.

    Pairs follow lexicographic order. ``z`` may be one vector or an ``n x d``
    batch; the result has the matching leading shape.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zz = np.atleast_2d(z)
    if zz.shape[1] != basis.arity:
        raise ValueError(f"expected {basis.arity} inputs, got {zz.shape[1]}")
    cols = [np.ones(zz.shape[0]), *zz.T]
    cols += [zz[:, i] * zz[:, j] for i, j in basis.pairs]
    out = np.column_stack(cols)
    return out[0] if single else out


@dataclass(frozen=True)
class StructuralEq:
    basis: PolyBasis
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).copy()
        theta.setflags(write=False)
        if theta.shape != (self.basis.dim,):
            raise ValueError(
                f"theta has shape {theta.shape}, basis needs ({self.basis.dim},)")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, arity: int) -> "StructuralEq":
        b = PolyBasis(arity)
        return cls(b, np.zeros(b.dim))

    def __call__(self, z) -> np.ndarray:
        return features(self.basis, z) @ self.theta


# --- covariate laws ---------------------------------------------------------

@dataclass(frozen=True)
class StandardNormal:
    """Independent N(0, 1) covariates."""

    dim: int

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.dim))

    def to_json(self) -> dict:
        return {"kind": "normal", "dim": self.dim}


@dataclass(frozen=True)
class Categorical:
    """Finite table of covariate vectors with probabilities."""

    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        sup = np.atleast_2d(np.asarray(self.support, dtype=float))
        p = np.asarray(self.probs, dtype=float)
        if len(sup) != len(p):
            raise ValueError("support and probs differ in length")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be nonnegative and sum to 1")
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "probs", p)

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(len(self.probs), size=n, p=self.probs)
        return self.support[idx]

    def to_json(self) -> dict:
        return {"kind": "categorical", "support": self.support.tolist(),
                "probs": self.probs.tolist()}


def covariate_law_from_json(doc: Mapping):
    if doc["kind"] == "normal":
        return StandardNormal(int(doc["dim"]))
    if doc["kind"] == "categorical":
        return Categorical(doc["support"], doc["probs"])
    raise ValueError(f"unknown covariate law {doc['kind']!r}")


# --- regimes ------------------------------------------------------------------

@dataclass(frozen=True)
class ValuePolicy:
    """How an intervened treatment's value is chosen: fixed, normal or uniform."""

    kind: str = "normal"
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fixed", "normal", "uniform"):
            raise ValueError(f"unknown policy {self.kind!r}")

    @classmethod
    def fixed(cls, value: float) -> "ValuePolicy":
        return cls("fixed", float(value), 0.0)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(n, self.a)
        if self.kind == "normal":
            return self.a + self.b * rng.standard_normal(n)
        return rng.uniform(self.a, self.b, n)


@dataclass(frozen=True)
class Regime:
    """A set of intervened treatments, each with a value policy.

    The empty set is the observational regime. Treatments without an explicit
    policy get i.i.d. standard normal values.
    """

    intervened: frozenset = frozenset()
    policies: Mapping[int, ValuePolicy] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "intervened", frozenset(int(i) for i in self.intervened))
        extra = set(self.policies) - self.intervened
        if extra:
            raise ValueError(f"policies for non-intervened treatments {sorted(extra)}")
        if any(i < 0 for i in self.intervened):
            raise ValueError("treatment indices must be >= 0")

    @classmethod
    def do(cls, *indices: int, values: Mapping[int, float] | None = None) -> "Regime":
        pol = {int(i): ValuePolicy.fixed(v) for i, v in (values or {}).items()}
        return cls(frozenset(indices), pol)

    @property
    def label(self) -> str:
        return regime_label(self.intervened)

    def policy(self, i: int) -> ValuePolicy:
        return self.policies.get(i, ValuePolicy())

    def __hash__(self):
        return hash((self.intervened, tuple(sorted(self.policies.items()))))


OBSERVATIONAL = Regime()


def regime_label(intervened) -> str:
    idx = sorted(int(i) for i in intervened)
    return "obs" if not idx else "do(" + ",".join(map(str, idx)) + ")"


def all_regimes(K: int) -> list[Regime]:
    """All 2^K intervention sets, ordered by size then lexicographically."""
    out = []
    for r in range(K + 1):
        out += [Regime(frozenset(c)) for c in combinations(range(K), r)]
    return out


# --- models -------------------------------------------------------------------

@dataclass(frozen=True)
class SymmetricAnm:
    """``X_i = f_i(C) + U_i`` for each treatment, ``Y = f_Y(C, X) + U_Y``."""

    treatment_eqs: tuple
    outcome_eq: StructuralEq
    sigma: np.ndarray
    covariate_law: object

    def __post_init__(self):
        eqs = tuple(self.treatment_eqs)
        object.__setattr__(self, "treatment_eqs", eqs)
        s = check_cov(self.sigma)
        s.setflags(write=False)
        object.__setattr__(self, "sigma", s)
        m, K = self.covariate_law.dim, len(eqs)
        if any(e.basis.arity != m for e in eqs):
            raise ValueError("treatment equations must take the covariates only")
        if self.outcome_eq.basis.arity != m + K:
            raise ValueError("outcome equation arity must be covariate_dim + K")
        if s.shape != (K + 1, K + 1):
            raise ValueError(f"sigma must be {K + 1}x{K + 1}")

    @property
    def K(self) -> int:
        return len(self.treatment_eqs)

    @property
    def covariate_dim(self) -> int:
        return self.covariate_law.dim

    def treatment_means(self, C) -> np.ndarray:
        C = np.atleast_2d(C)
        return np.column_stack([f(C) for f in self.treatment_eqs]) if self.K else \
            np.zeros((len(C), 0))

    def outcome_mean(self, C, X) -> np.ndarray:
        return self.outcome_eq(np.hstack([np.atleast_2d(C), np.atleast_2d(X)]))

    def permuted(self, perm: Sequence[int]) -> "SymmetricAnm":
        """Relabel treatments so new treatment ``k`` is old treatment ``perm[k]``."""
        perm = list(perm)
        m, K = self.covariate_dim, self.K
        # outcome theta: re-index via the input permutation of (C, X)
        inp = list(range(m)) + [m + p for p in perm]
        old = PolyBasis(m + K)
        pos = {(i, j): k for k, (i, j) in enumerate(old.pairs)}
        th = self.outcome_eq.theta
        new = [th[0], *[th[1 + a] for a in inp]]
        for i, j in old.pairs:
            a, b = sorted((inp[i], inp[j]))
            new.append(th[1 + old.arity + pos[(a, b)]])
        slots = perm + [K]
        return SymmetricAnm(
            tuple(self.treatment_eqs[p] for p in perm),
            StructuralEq(old, np.array(new)),
            self.sigma[np.ix_(slots, slots)],
            self.covariate_law,
        )


@dataclass(frozen=True)
class AsymmetricPair:
    """``X_i = f_i(C) + U_i``, ``X_j = f_j(C, X_i) + U_j``, ``Y = f_Y(C, X_i, X_j) + U_Y``.

    Treatment 0 is ``X_i``, treatment 1 is ``X_j``.
    """

    f_i: StructuralEq
    f_j: StructuralEq
    outcome_eq: StructuralEq
    sigma: np.ndarray
    covariate_law: object

    def __post_init__(self):
        s = check_cov(self.sigma)
        s.setflags(write=False)
        object.__setattr__(self, "sigma", s)
        m = self.covariate_law.dim
        if self.f_i.basis.arity != m or self.f_j.basis.arity != m + 1:
            raise ValueError("f_i takes C; f_j takes (C, X_i)")
        if self.outcome_eq.basis.arity != m + 2:
            raise ValueError("outcome equation takes (C, X_i, X_j)")
        if s.shape != (3, 3):
            raise ValueError("sigma must be 3x3")

    K = 2

    @property
    def covariate_dim(self) -> int:
        return self.covariate_law.dim

    def outcome_mean(self, C, X) -> np.ndarray:
        return self.outcome_eq(np.hstack([np.atleast_2d(C), np.atleast_2d(X)]))


# --- datasets -----------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Tagged samples pooled across regimes.

    Arrays are row-aligned: ``regime`` holds a label per record (see
    :func:`regime_label`) and ``intervened[r, i]`` flags whether treatment ``i``
    was set by intervention in record ``r``.
    """

    regime: np.ndarray
    C: np.ndarray
    X: np.ndarray
    intervened: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        n = len(self.Y)
        arrs = dict(
            regime=np.asarray(self.regime, dtype=object).reshape(n),
            C=np.asarray(self.C, dtype=float).reshape(n, -1) if n else
            np.asarray(self.C, dtype=float).reshape(0, np.shape(self.C)[-1]),
            X=np.asarray(self.X, dtype=float).reshape(n, -1) if n else
            np.asarray(self.X, dtype=float).reshape(0, np.shape(self.X)[-1]),
            intervened=np.asarray(self.intervened, dtype=bool).reshape(n, -1) if n else
            np.asarray(self.intervened, dtype=bool).reshape(0, np.shape(self.X)[-1]),
            Y=np.asarray(self.Y, dtype=float).reshape(n),
        )
        for k, v in arrs.items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)
        if self.intervened.shape != self.X.shape:
            raise InvalidDataError("intervened flags must match the treatment matrix")
        for name in ("C", "X", "Y"):
            bad = ~np.isfinite(getattr(self, name))
            if bad.any():
                raise InvalidDataError(f"non-finite {name}", int(np.argwhere(bad)[0][0]))
        for lab in set(self.regime):
            rows = np.flatnonzero(self.regime == lab)
            flags = self.intervened[rows]
            bad = np.flatnonzero(np.any(flags != flags[0], axis=1))
            r = int(rows[bad[0]]) if bad.size else int(rows[0])
            if bad.size or lab != regime_label(np.flatnonzero(flags[0])):
                raise InvalidDataError(f"regime {lab!r} disagrees with flags", r)

    @property
    def n(self) -> int:
        return len(self.Y)

    def __len__(self) -> int:
        return self.n

    @property
    def K(self) -> int:
        return self.X.shape[1]

    @property
    def covariate_dim(self) -> int:
        return self.C.shape[1]

    @property
    def regimes(self) -> dict[str, Regime]:
        out = {}
        for lab, flags in zip(self.regime, self.intervened):
            if lab not in out:
                out[lab] = Regime(frozenset(np.flatnonzero(flags).tolist()))
        return out

    def select(self, rows) -> "Dataset":
        return Dataset(self.regime[rows], self.C[rows], self.X[rows],
                       self.intervened[rows], self.Y[rows])

    def only(self, *labels: str) -> "Dataset":
        return self.select(np.isin(self.regime, labels))

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.regime for p in parts]),
            np.vstack([p.C for p in parts]),
            np.vstack([p.X for p in parts]),
            np.vstack([p.intervened for p in parts]),
            np.concatenate([p.Y for p in parts]),
        )

    def header(self) -> list[str]:
        m, K = self.covariate_dim, self.K
        return (["regime_id"] + [f"c_{i}" for i in range(m)] + [f"x_{i}" for i in range(K)]
                + [f"i_{i}" for i in range(K)] + ["y"])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for r in range(self.n):
                w.writerow([self.regime[r], *map(_fmt, self.C[r]), *map(_fmt, self.X[r]),
                            *(int(b) for b in self.intervened[r]), _fmt(self.Y[r])])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        """Read a dataset CSV; malformed rows raise with file and line number."""
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise InvalidDataError(f"{path}: empty file")
        head = rows[0]
        m = sum(h.startswith("c_") for h in head)
        K = sum(h.startswith("x_") for h in head)
        expected = ["regime_id"] + [f"c_{i}" for i in range(m)] + \
            [f"x_{i}" for i in range(K)] + [f"i_{i}" for i in range(K)] + ["y"]
        if head != expected:
            raise InvalidDataError(f"{path}:1: bad header {head}")
        reg, C, X, I, Y = [], [], [], [], []
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(head):
                raise InvalidDataError(
                    f"{path}:{lineno}: expected {len(head)} columns, got {len(row)}")
            try:
                vals = [float(v) for v in row[1:]]
                flags = [int(v) for v in row[1 + m + K:1 + m + 2 * K]]
            except ValueError as exc:
                raise InvalidDataError(f"{path}:{lineno}: {exc}") from None
            if any(f not in (0, 1) for f in flags):
                raise InvalidDataError(f"{path}:{lineno}: flags must be 0 or 1")
            reg.append(row[0])
            C.append(vals[:m])
            X.append(vals[m:m + K])
            I.append([bool(f) for f in flags])
            Y.append(vals[-1])
        n = len(Y)
        try:
            return cls(np.array(reg, dtype=object),
                       np.array(C, dtype=float).reshape(n, m),
                       np.array(X, dtype=float).reshape(n, K),
                       np.array(I, dtype=bool).reshape(n, K),
                       np.array(Y, dtype=float))
        except InvalidDataError as exc:
            line = "" if exc.index is None else f":{exc.index + 2}"
            raise InvalidDataError(f"{path}{line}: {exc}") from None


def _fmt(v) -> str:
    return format(float(v), ".17g")


def empty_dataset(covariate_dim: int, K: int) -> Dataset:
    return Dataset(np.array([], dtype=object), np.zeros((0, covariate_dim)),
                   np.zeros((0, K)), np.zeros((0, K), dtype=bool), np.zeros(0))


# --- sampling -----------------------------------------------------------------

def sample(scm, regime: Regime, n: int, seed: int = 0, stream: Sequence[int] = (),
           return_noise: bool = False):
    """Draw ``n`` records from ``scm`` under ``regime``.

    Covariates, the joint noise vector and intervention values come from
    separate random streams under ``(seed, *stream)``. Noise of intervened
    treatments is drawn and discarded, so the other coordinates do not depend
    on which treatments were intervened.
    """
    K = scm.K
    if any(i >= K for i in regime.intervened):
        raise ValueError(f"regime {regime.label} out of range for K={K}")
    C = scm.covariate_law.sample(make_rng(seed, *stream, _S_COV), n)
    U = make_rng(seed, *stream, _S_NOISE).standard_normal((n, K + 1)) @ \
        psd_factor(scm.sigma).T
    do_rng = make_rng(seed, *stream, _S_DO)
    flags = np.zeros((n, K), dtype=bool)
    X = np.zeros((n, K))
    # fixed draw order over all treatments keeps streams aligned across regimes
    do_vals = {i: regime.policy(i).draw(do_rng, n) for i in sorted(regime.intervened)}
    if isinstance(scm, AsymmetricPair):
        X[:, 0] = do_vals[0] if 0 in do_vals else scm.f_i(C) + U[:, 0]
        parents = np.column_stack([C, X[:, 0]])
        X[:, 1] = do_vals[1] if 1 in do_vals else scm.f_j(parents) + U[:, 1]
    else:
        means = scm.treatment_means(C)
        for i in range(K):
            X[:, i] = do_vals[i] if i in do_vals else means[:, i] + U[:, i]
    for i in regime.intervened:
        flags[:, i] = True
    Y = scm.outcome_mean(C, X) + U[:, K]
    data = Dataset(np.full(n, regime.label, dtype=object), C, X, flags, Y)
    return (data, U) if return_noise else data


def sample_regimes(scm, regimes: Sequence[Regime], sizes: Sequence[int] | int,
                   seed: int = 0, stream: Sequence[int] = ()) -> Dataset:
    """Pool samples from several regimes; each regime uses its own stream."""
    if isinstance(sizes, int):
        sizes = split_evenly(sizes, len(regimes))
    parts = [sample(scm, r, k, seed, (*stream, j)) for j, (r, k) in
             enumerate(zip(regimes, sizes))]
    return Dataset.concat(parts)


def split_evenly(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (j < extra) for j in range(parts)]


def random_scm(K: int = 4, covariate_dim: int = 4, theta_range=(-2.0, 2.0),
               cov_range=(-1.0, 1.0), seed: int = 0, stream: Sequence[int] = (),
               covariate_law=None) -> SymmetricAnm:
    """Random symmetric ANM with uniform coefficients and a shrunk covariance.

    Raw covariance entries are uniform over ``cov_range``; the diagonal is
    replaced by ``|value| + 0.1`` before shrinkage so every variance starts
    positive.
    """
    lo, hi = theta_range
    clo, chi = cov_range
    if lo > hi or clo > chi:
        raise ValueError("ranges must be nonempty")
    rng = make_rng(seed, *stream)
    tb = PolyBasis(covariate_dim)
    ob = PolyBasis(covariate_dim + K)
    treat = tuple(StructuralEq(tb, rng.uniform(lo, hi, tb.dim)) for _ in range(K))
    outcome = StructuralEq(ob, rng.uniform(lo, hi, ob.dim))
    raw = rng.uniform(clo, chi, (K + 1, K + 1))
    raw = np.triu(raw) + np.triu(raw, 1).T
    np.fill_diagonal(raw, np.abs(np.diag(raw)) + 0.1)
    sigma = psd_shrink(raw)
    law = covariate_law if covariate_law is not None else StandardNormal(covariate_dim)
    return SymmetricAnm(treat, outcome, sigma, law)


def true_mean(scm, c, x) -> float:
    """Noise-free outcome ``f_Y(c, x)`` under the true model."""
    c = np.asarray(c, dtype=float)
    x = np.asarray(x, dtype=float)
    if c.shape[-1] != scm.covariate_dim or x.shape[-1] != scm.K:
        raise ValueError("covariate or treatment dimension mismatch")
    return scm.outcome_eq(np.concatenate([c, x], axis=-1))


# --- serialization ------------------------------------------------------------

def scm_to_json(scm) -> dict:
    if isinstance(scm, AsymmetricPair):
        doc = {"kind": "asymmetric", "K": 2, "covariate_dim": scm.covariate_dim,
               "theta": {"treatments": [scm.f_i.theta.tolist(), scm.f_j.theta.tolist()],
                         "outcome": scm.outcome_eq.theta.tolist()}}
    else:
        doc = {"kind": "symmetric", "K": scm.K, "covariate_dim": scm.covariate_dim,
               "theta": {"treatments": [e.theta.tolist() for e in scm.treatment_eqs],
                         "outcome": scm.outcome_eq.theta.tolist()}}
    doc["sigma"] = scm.sigma.ravel().tolist()
    doc["covariate_law"] = scm.covariate_law.to_json()
    return doc


def scm_from_json(doc: Mapping):
    K, m = int(doc["K"]), int(doc["covariate_dim"])
    sigma = np.array(doc["sigma"], dtype=float).reshape(K + 1, K + 1)
    law = covariate_law_from_json(doc["covariate_law"])
    tr = doc["theta"]["treatments"]
    out = StructuralEq(PolyBasis(m + K), doc["theta"]["outcome"])
    if doc.get("kind", "symmetric") == "asymmetric":
        return AsymmetricPair(StructuralEq(PolyBasis(m), tr[0]),
                              StructuralEq(PolyBasis(m + 1), tr[1]), out, sigma, law)
    return SymmetricAnm(tuple(StructuralEq(PolyBasis(m), t) for t in tr), out, sigma, law)


def save_scm(scm, path) -> None:
    Path(path).write_text(json.dumps(scm_to_json(scm), indent=2) + "\n")


def load_scm(path):
    return scm_from_json(json.loads(Path(path).read_text()))
