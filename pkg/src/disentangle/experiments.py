"""Synthetic and stroke-style sweeps with baseline and oracle scoring.

Every cell (seed, sample size or bound) owns its random streams, so cells
can run in any order or in parallel and still give identical records.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import groupby
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import DisentangleError
from .estimate import FitOptions, FitReport, baseline_report, fit, fit_baseline
from .gaussian import cond_variance, psd_shrink
from .infer import predict_batch
from .model import (Categorical, PolyBasis, Regime, StructuralEq, SymmetricAnm, ValuePolicy,
                    all_regimes, random_scm, sample, sample_regimes)
from .rng import make_rng

log = logging.getLogger(__name__)

ROOT_2_OVER_PI = math.sqrt(2.0 / math.pi)

# stream tags
_S_SCM, _S_TRAIN, _S_EVAL, _S_SIGMA = 0, 1, 2, 3


def oracle_mae(sigma, observed: Sequence[int]) -> float:
    """Bayes-optimal MAE: ``sqrt(2/pi)`` times the conditional sd of ``U_Y``.

    ``sigma`` is over the treatment noises followed by the outcome noise;
    ``observed`` lists the treatments whose noise is seen.
    """
    sigma = np.asarray(sigma, dtype=float)
    y = sigma.shape[0] - 1
    var = cond_variance(sigma, y, sorted(observed)) if len(observed) else sigma[y, y]
    return ROOT_2_OVER_PI * math.sqrt(max(var, 0.0))


@dataclass
class MetricsRecord:
    method: str  # ours | baseline | oracle
    regime: str
    n: int
    seed: int
    mae: float
    theta_mae: float = float("nan")
    sigma_mae: float = float("nan")
    converged: bool = True
    bound: float | None = None

    def __post_init__(self):
        if not (self.mae >= 0 or math.isnan(self.mae)):
            raise ValueError("MAE must be nonnegative")

    @property
    def key(self) -> tuple:
        return (self.method, self.regime, self.n, -1.0 if self.bound is None else self.bound)


# --- configs ------------------------------------------------------------------

DEFAULT_TRAIN = ((), (0, 1), (1, 2), (2, 3))


@dataclass(frozen=True)
class SyntheticConfig:
    K: int = 4
    covariate_dim: int = 4
    sizes: tuple = tuple(2 ** i for i in range(5, 14))
    train_regimes: tuple = DEFAULT_TRAIN
    seeds: int = 10
    seed: int = 0
    eval_n: int = 10_000
    fit: FitOptions = field(default_factory=FitOptions)

    def __post_init__(self):
        regs = [frozenset(r) for r in self.train_regimes]
        object.__setattr__(self, "train_regimes", tuple(tuple(sorted(r)) for r in regs))
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if frozenset() not in regs:
            raise ValueError("training regimes must include the observational regime")
        covered = set().union(*regs)
        if covered != set(range(self.K)):
            missing = sorted(set(range(self.K)) - covered)
            raise ValueError(f"treatments {missing} are never intervened in training")
        if any(i >= self.K or i < 0 for r in regs for i in r):
            raise ValueError("training regime index out of range")
        if self.seeds < 1 or self.eval_n < 1 or not self.sizes or min(self.sizes) < 1:
            raise ValueError("seeds, eval_n and sizes must be positive")

    def regimes(self) -> list[Regime]:
        return [Regime(frozenset(r)) for r in self.train_regimes]


# Covariate cells (S, A, C) with probabilities; mildly skewed, sums to 1.
STROKE_TABLE = (
    ((0, 0, 0), 0.06), ((0, 0, 1), 0.08), ((0, 0, 2), 0.07),
    ((0, 1, 0), 0.10), ((0, 1, 1), 0.11), ((0, 1, 2), 0.08),
    ((1, 0, 0), 0.07), ((1, 0, 1), 0.09), ((1, 0, 2), 0.06),
    ((1, 1, 0), 0.09), ((1, 1, 1), 0.11), ((1, 1, 2), 0.08),
)

# Outcome coefficients over (S, A, C, alpha_a, alpha_h) in basis order.
STROKE_OUTCOME = {
    "1": -0.25, "S": 0.1, "A": -0.1, "C": 0.25, "aa": 1.0, "ah": 0.75,
    "S*A": -3.0, "S*aa": -0.1, "A*aa": -0.3, "S*ah": 0.1, "A*ah": 0.2, "C*ah": 0.3,
    "aa*ah": -0.45,
}
STROKE_NAMES = ("S", "A", "C", "aa", "ah")


def stroke_outcome_theta(coefs=None) -> np.ndarray:
    """Outcome coefficients laid out in the five-input polynomial basis."""
    coefs = dict(STROKE_OUTCOME if coefs is None else coefs)
    b = PolyBasis(5)
    names = ["1", *STROKE_NAMES] + [f"{STROKE_NAMES[i]}*{STROKE_NAMES[j]}" for i, j in b.pairs]
    unknown = set(coefs) - set(names)
    if unknown:
        raise ValueError(f"unknown outcome terms {sorted(unknown)}")
    return np.array([float(coefs.get(n, 0.0)) for n in names])


@dataclass(frozen=True)
class StrokeConfig:
    table: tuple = STROKE_TABLE
    treatment_coef: float = 0.3
    outcome: tuple = tuple(STROKE_OUTCOME.items())
    bounds: tuple = (0.0, 0.2, 0.4, 0.6, 0.8)
    n_obs: int = 512
    n_joint: int = 512
    n_eval: int = 5000
    seeds: int = 5
    seed: int = 0
    do_policy: ValuePolicy = ValuePolicy()
    fit: FitOptions = field(default_factory=FitOptions)

    def __post_init__(self):
        p = np.array([r[1] for r in self.table], dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("covariate table must be nonnegative and sum to 1")
        if any(b < 0 for b in self.bounds):
            raise ValueError("confounding bounds must be >= 0")
        if min(self.n_obs, self.n_joint, self.n_eval, self.seeds) < 1:
            raise ValueError("sample counts and seeds must be positive")

    def covariate_law(self) -> Categorical:
        return Categorical([r[0] for r in self.table], [r[1] for r in self.table])


# --- shared scoring -------------------------------------------------------------

def _mae(pred, y) -> float:
    return float(np.mean(np.abs(pred - y)))


def _score(scm: SymmetricAnm, ours: FitReport | None, base: FitReport | None,
           ev, observed, common: dict) -> list[MetricsRecord]:
    out = [MetricsRecord("oracle", mae=_mae(predict_batch(FitReport.from_scm(scm), ev.C, ev.X,
                                                          observed), ev.Y),
                         theta_mae=0.0, sigma_mae=0.0, **common)]
    tru_y = scm.outcome_eq.theta
    if ours is None:
        out.append(MetricsRecord("ours", mae=float("nan"), converged=False, **common))
    else:
        out.append(MetricsRecord(
            "ours", mae=_mae(predict_batch(ours, ev.C, ev.X, observed), ev.Y),
            theta_mae=float(np.mean(np.abs(ours.theta[-1] - tru_y))),
            sigma_mae=float(np.mean(np.abs(ours.sigma - scm.sigma))),
            converged=ours.converged, **common))
    if base is None:
        out.append(MetricsRecord("baseline", mae=float("nan"), converged=False, **common))
    else:
        out.append(MetricsRecord(
            "baseline", mae=_mae(predict_batch(base, ev.C, ev.X, observed, corrected=False),
                                 ev.Y),
            theta_mae=float(np.mean(np.abs(base.theta[-1] - tru_y))), **common))
    return out


def _try_fit(data, opts):
    try:
        return fit(data, opts)
    except (DisentangleError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        log.warning("fit failed: %s", e)
        return None


def _try_baseline(data):
    try:
        return baseline_report(data, fit_baseline(data))
    except (DisentangleError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        log.warning("baseline failed: %s", e)
        return None


def _run_cells(fn, cells, threads: int) -> list[MetricsRecord]:
    if threads > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(fn, cells))
    else:
        parts = [fn(c) for c in cells]
    return [r for p in parts for r in p]


# --- synthetic sweep ------------------------------------------------------------

def synthetic_scm(cfg: SyntheticConfig, seed: int) -> SymmetricAnm:
    return random_scm(cfg.K, cfg.covariate_dim, seed=seed, stream=(_S_SCM,))


def _synthetic_cell(args) -> list[MetricsRecord]:
    cfg, seed = args
    scm = synthetic_scm(cfg, seed)
    evals = [(r, sample(scm, r, cfg.eval_n, seed, (_S_EVAL, j)))
             for j, r in enumerate(all_regimes(cfg.K))]
    out = []
    for n in cfg.sizes:
        data = sample_regimes(scm, cfg.regimes(), n, seed, (_S_TRAIN, n))
        ours, base = _try_fit(data, cfg.fit), _try_baseline(data)
        for reg, ev in evals:
            observed = [i for i in range(cfg.K) if i not in reg.intervened]
            out += _score(scm, ours, base, ev, observed,
                          {"regime": reg.label, "n": n, "seed": seed})
    return out


def run_synthetic(cfg: SyntheticConfig = SyntheticConfig(), threads: int = 1
                  ) -> list[MetricsRecord]:
    """Fit ours and the pooled baseline per seed and size; score all regimes.

    Evaluation draws for a seed are shared across sample sizes.
    """
    cells = [(cfg, cfg.seed + s) for s in range(cfg.seeds)]
    return _run_cells(_synthetic_cell, cells, threads)


# --- stroke sweep ---------------------------------------------------------------

def stroke_sigma(bound: float, seed: int) -> np.ndarray:
    """Unit-variance 3x3 noise covariance with off-diagonals in ``[-bound, bound]``.

    The same uniform draws are scaled by each bound, so a seed's matrices
    differ across the grid only in magnitude.
    """
    u = make_rng(seed, _S_SIGMA).uniform(-1.0, 1.0, 3)
    raw = np.eye(3)
    for k, (i, j) in enumerate([(0, 1), (0, 2), (1, 2)]):
        raw[i, j] = raw[j, i] = bound * u[k]
    return psd_shrink(raw)


def stroke_scm(cfg: StrokeConfig, bound: float, seed: int) -> SymmetricAnm:
    tb, ob = PolyBasis(3), PolyBasis(5)
    th = np.zeros(tb.dim)
    th[1:4] = cfg.treatment_coef
    treat = (StructuralEq(tb, th), StructuralEq(tb, th))
    outcome = StructuralEq(ob, stroke_outcome_theta(dict(cfg.outcome)))
    return SymmetricAnm(treat, outcome, stroke_sigma(bound, seed), cfg.covariate_law())


def _stroke_cell(args) -> list[MetricsRecord]:
    cfg, bound, seed = args
    scm = stroke_scm(cfg, bound, seed)
    joint = Regime(frozenset({0, 1}), {0: cfg.do_policy, 1: cfg.do_policy})
    data = sample_regimes(scm, [Regime(), joint], [cfg.n_obs, cfg.n_joint], seed, (_S_TRAIN,))
    ours, base = _try_fit(data, cfg.fit), _try_baseline(data)
    reg = Regime(frozenset({0}), {0: cfg.do_policy})
    ev = sample(scm, reg, cfg.n_eval, seed, (_S_EVAL,))
    return _score(scm, ours, base, ev, [1], {"regime": reg.label, "n": data.n, "seed": seed,
                                             "bound": float(bound)})


def run_stroke(cfg: StrokeConfig = StrokeConfig(), threads: int = 1) -> list[MetricsRecord]:
    """Sweep the confounding bound; score ``do(alpha_a)`` with ``alpha_h`` observed.

    Training data for a seed reuse the same random streams at every bound.
    """
    cells = [(cfg, b, cfg.seed + s) for b in cfg.bounds for s in range(cfg.seeds)]
    return _run_cells(_stroke_cell, cells, threads)


# --- aggregation and files -------------------------------------------------------

@dataclass
class Aggregate:
    method: str
    regime: str
    n: int
    bound: float | None
    count: int
    mae_mean: float
    mae_ci95: float
    theta_mae_mean: float
    sigma_mae_mean: float
    converged_frac: float


def ci95(values) -> float:
    """Half-width of a t-based 95% interval for the mean (``nan`` below 2 values)."""
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    if len(v) < 2:
        return float("nan")
    return float(stats.t.ppf(0.975, len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v)))


def _nanmean(v) -> float:
    v = np.asarray(v, dtype=float)
    v = v[~np.isnan(v)]
    return float(v.mean()) if len(v) else float("nan")


def aggregate(records: Sequence[MetricsRecord]) -> list[Aggregate]:
    out = []
    for key, grp in groupby(sorted(records, key=lambda r: r.key), key=lambda r: r.key):
        grp = list(grp)
        maes = [r.mae for r in grp]
        out.append(Aggregate(
            key[0], key[1], key[2], grp[0].bound, len(grp), _nanmean(maes), ci95(maes),
            _nanmean([r.theta_mae for r in grp]), _nanmean([r.sigma_mae for r in grp]),
            float(np.mean([r.converged for r in grp]))))
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "%.17g" % v
    return "" if v is None else str(v)


def _write(path, rows, names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            d = asdict(r)
            w.writerow([_fmt(d[k]) for k in names])


RAW_COLUMNS = ["method", "regime", "n", "seed", "mae", "theta_mae", "sigma_mae", "converged"]


def write_metrics(records: Sequence[MetricsRecord], raw_path, agg_path) -> list[Aggregate]:
    """Raw records and per-(method, regime, n) summaries as CSV.

    A ``bound`` column is appended when any record carries one.
    """
    has_bound = any(r.bound is not None for r in records)
    cols = RAW_COLUMNS + (["bound"] if has_bound else [])
    records = sorted(records, key=lambda r: (*r.key, r.seed))
    _write(raw_path, records, cols)
    agg = aggregate(records)
    acols = [f.name for f in fields(Aggregate)]
    if not has_bound:
        acols.remove("bound")
    _write(agg_path, agg, acols)
    return agg


def read_metrics(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            b = row.get("bound")
            out.append(MetricsRecord(
                row["method"], row["regime"], int(row["n"]), int(row["seed"]),
                float(row["mae"]), float(row["theta_mae"]), float(row["sigma_mae"]),
                row["converged"] == "1", float(b) if b not in (None, "") else None))
    return out


def summary_table(agg: Sequence[Aggregate]) -> str:
    """Compact text table of mean MAE by method, one row per cell."""
    lines = [f"{'regime':<12}{'n':>7}{'bound':>7}  {'oracle':>10}{'ours':>10}{'baseline':>10}"]
    cells: dict = {}
    for a in agg:
        cells.setdefault((a.regime, a.n, a.bound), {})[a.method] = a.mae_mean
    for (reg, n, b), m in sorted(cells.items(), key=lambda kv: (kv[0][1], kv[0][2] or 0,
                                                                  len(kv[0][0]), kv[0][0])):
        bs = "" if b is None else f"{b:g}"
        lines.append(f"{reg:<12}{n:>7}{bs:>7}  " + "".join(
            f"{m.get(k, float('nan')):>10.4f}" for k in ("oracle", "ours", "baseline")))
    return "\n".join(lines)


def save_outputs(records, out_dir, stem: str) -> list[Aggregate]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return write_metrics(records, out / f"{stem}_raw.csv", out / f"{stem}_agg.csv")
