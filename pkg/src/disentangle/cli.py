"""Command-line interface: ``disentangle <subcommand> ...``.

Exit codes: 0 success, 1 usage or config error, 2 verification failure,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import identify
from .errors import (DisentangleError, InvalidCovarianceError, InvalidDataError,
                     SingularConditioningError, OptimizationError, UnderdeterminedError,
                     UnshrinkableError)
from .estimate import FitOptions, FitReport, baseline_report, fit, fit_baseline
from .infer import Query, cate, predict_outcome
from .model import (Dataset, Regime, SymmetricAnm, ValuePolicy, random_scm, sample,
                    save_scm)
from .schemas import ConfigError, validate

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3
NUMERIC_ERRORS = (SingularConditioningError, OptimizationError, UnderdeterminedError,
                  UnshrinkableError, InvalidCovarianceError, np.linalg.LinAlgError,
                  ArithmeticError)

log = logging.getLogger("disentangle")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def _load_config(path, name: str) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    validate(doc, name)
    return doc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _fit_options(doc: dict, seed=None) -> FitOptions:
    doc = dict(doc)
    if "betas" in doc:
        doc["betas"] = tuple(doc["betas"])
    if seed is not None:
        doc["seed"] = seed
    return FitOptions(**doc)


def _policy(doc) -> ValuePolicy:
    return ValuePolicy() if doc is None else ValuePolicy(doc["kind"], doc.get("a", 0.0),
                                                         doc.get("b", 1.0))


# --- subcommands ----------------------------------------------------------------

DEFAULT_GEN_REGIMES = [
    {"intervened": [], "n": 2048},
    {"intervened": [0, 1], "n": 2048},
    {"intervened": [1, 2], "n": 2048},
    {"intervened": [2, 3], "n": 2048},
]


def cmd_gen(args) -> int:
    cfg = _load_config(args.config, "gen")
    K = cfg.get("K", 4)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    regs = cfg.get("regimes", DEFAULT_GEN_REGIMES if K == 4 else
                   [{"intervened": [], "n": 2048}, {"intervened": list(range(K)), "n": 2048}])
    scm = random_scm(K, cfg.get("covariate_dim", 4), tuple(cfg.get("theta_range", (-2, 2))),
                     tuple(cfg.get("cov_range", (-1, 1))), seed=seed, stream=(0,))
    if "noise_scale" in cfg:
        # scales every noise standard deviation; 0 gives a noise-free model
        s = float(cfg["noise_scale"])
        scm = SymmetricAnm(scm.treatment_eqs, scm.outcome_eq, scm.sigma * s * s,
                           scm.covariate_law)
    out = _out_dir(args)
    save_scm(scm, out / "scm.json")
    names = set()
    for j, r in enumerate(regs):
        idx = sorted(r["intervened"])
        if any(i >= K for i in idx):
            raise ConfigError(f"gen config invalid at /regimes/{j}/intervened: index >= K={K}")
        pol = _policy(r.get("policy"))
        reg = Regime(frozenset(idx), {i: pol for i in idx})
        name = r.get("name", "obs" if not idx else "do_" + "_".join(map(str, idx)))
        if name in names:
            raise ConfigError(f"gen config invalid at /regimes/{j}/name: duplicate {name!r}")
        names.add(name)
        sample(scm, reg, r["n"], seed, (1, j)).to_csv(out / f"{name}.csv")
        print(f"wrote {out / f'{name}.csv'} ({r['n']} records, {reg.label})")
    print(f"wrote {out / 'scm.json'}")
    return EXIT_OK


def cmd_fit(args) -> int:
    opts = _fit_options(_load_config(args.config, "fit"), args.seed)
    data = Dataset.concat([Dataset.from_csv(p) for p in args.data])
    out = _out_dir(args)
    if args.baseline:
        rep = baseline_report(data, fit_baseline(data))
        rep.save(out / "baseline_fit.json")
        print(f"baseline fit on {data.n} records -> {out / 'baseline_fit.json'}")
        return EXIT_OK
    rep = fit(data, opts)
    rep.save(out / "fit.json")
    lines = [
        f"records: {data.n}",
        f"regimes: {', '.join(sorted(data.regimes))}",
        f"final log-likelihood: {rep.ll_trace[-1]:.10g}",
        f"iterations: {rep.iterations}",
        f"converged: {'yes' if rep.converged else 'no'}",
    ]
    if rep.unfitted:
        lines.append(f"unfitted equations: {', '.join(rep.unfitted)}")
    text = "\n".join(lines) + "\n"
    (out / "fit_summary.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    rep = FitReport.load(args.fit)
    doc = json.loads(Path(args.query).read_text())
    validate(doc, "query")
    q = Query.from_json(doc)
    if len(q.c) != rep.covariate_dim:
        raise UsageError(f"query has {len(q.c)} covariates, fit expects {rep.covariate_dim}")
    if args.cate:
        if len(q.do) != 1:
            raise UsageError("--cate needs exactly one intervened treatment in the query")
        (i, xi), = q.do.items()
        if not 0 <= i < rep.K:
            raise UsageError(f"treatment {i} out of range for K={rep.K}")
        value = cate(rep, q.c, i, xi, n_mc=args.n_mc, seed=args.seed or 0)
        kind = "cate"
    else:
        try:
            q.x(rep.K)
        except ValueError as e:
            raise UsageError(str(e)) from None
        value = predict_outcome(rep, q, corrected=not args.no_correction)
        kind = "mean"
    print(repr(value))
    if args.out:
        _dump(_out_dir(args) / "prediction.json",
              {"kind": kind, "prediction": value, "query": q.to_json(),
               "corrected": not args.no_correction})
    return EXIT_OK


def _verify_one(which: str, cfg: dict, args):
    p = args.p if args.p is not None else cfg.get("p", 0.3)
    if which == "s31":
        return identify.verify_section31(p, strict=False)
    if which == "g32":
        n = args.n if args.n is not None else cfg.get("n", 200_000)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        return identify.verify_gaussian32(n, seed, strict=False)
    return identify.verify_cu_dependence(p)


def cmd_verify(args) -> int:
    cfg = _load_config(args.config, "verify")
    if args.p is not None and not 0 < args.p <= 1:
        raise UsageError("--p must lie in (0, 1]")
    if args.n is not None and args.n < 100_000:
        raise UsageError("--n must be at least 100000")
    names = ["s31", "g32", "cu"] if args.which == "all" else [args.which]
    if args.which == "s31" and args.p == 1.0:
        raise UsageError("s31 needs p in (0, 1)")
    out = _out_dir(args) if args.out else None
    code = EXIT_OK
    for name in names:
        rep = _verify_one(name, cfg, args)
        if out is not None:
            (out / f"verify_{name}.json").write_text(rep.dumps() + "\n")
        for c in rep.checks:
            print(f"{name} {c.regime}: {c.tv_distance:.6g} expected {c.expected_relation} "
                  f"-> {'pass' if c.passed else 'FAIL'}")
        if rep.status == "unresolved":
            d = rep.details
            print(f"{name}: unresolved; no declared coupling gives the claimed "
                  f"{d['claimed']['p_M']:.6g} vs {d['claimed']['p_M_prime']:.6g} "
                  f"(searched {d['searched']})")
        elif not rep.passed:
            print(f"{name}: FAILED in {', '.join(rep.failing())}", file=sys.stderr)
            code = EXIT_VERIFY
        else:
            print(f"{name}: pass")
    return code


def _synthetic_config(doc: dict, seed) -> ex.SyntheticConfig:
    doc = dict(doc)
    if "fit" in doc:
        doc["fit"] = _fit_options(doc["fit"])
    if "sizes" in doc:
        doc["sizes"] = tuple(doc["sizes"])
    if "train_regimes" in doc:
        doc["train_regimes"] = tuple(tuple(r) for r in doc["train_regimes"])
    if seed is not None:
        doc["seed"] = seed
    return ex.SyntheticConfig(**doc)


def _stroke_config(doc: dict, seed) -> ex.StrokeConfig:
    doc = dict(doc)
    if "fit" in doc:
        doc["fit"] = _fit_options(doc["fit"])
    if "table" in doc:
        doc["table"] = tuple((tuple(r["cell"]), r["p"]) for r in doc["table"])
    if "outcome" in doc:
        ex.stroke_outcome_theta(doc["outcome"])
        doc["outcome"] = tuple(doc["outcome"].items())
    if "bounds" in doc:
        doc["bounds"] = tuple(doc["bounds"])
    if "do_policy" in doc:
        doc["do_policy"] = _policy(doc["do_policy"])
    if seed is not None:
        doc["seed"] = seed
    return ex.StrokeConfig(**doc)


def cmd_experiment(args) -> int:
    cfg_doc = _load_config(args.config, args.kind)
    if args.kind == "synthetic":
        recs = ex.run_synthetic(_synthetic_config(cfg_doc, args.seed), threads=args.threads)
    else:
        recs = ex.run_stroke(_stroke_config(cfg_doc, args.seed), threads=args.threads)
    agg = ex.save_outputs(recs, _out_dir(args), args.kind)
    print(ex.summary_table(agg))
    failed = sum(1 for r in recs if r.method != "oracle" and np.isnan(r.mae))
    if failed:
        print(f"{failed} fitted cells failed (recorded with converged=0)", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    recs = []
    for p in args.metrics:
        recs += ex.read_metrics(p)
    if args.out:
        agg = ex.save_outputs(recs, _out_dir(args), "report")
    else:
        agg = ex.aggregate(recs)
    print(ex.summary_table(agg))
    return EXIT_OK


# --- wiring ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="disentangle",
                description="Learn single-intervention effects from observational and "
                            "joint-interventional data.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=_seed, metavar="N")
        sp.add_argument("--out", metavar="DIR", required=out_required)

    sp = sub.add_parser("gen", help="draw a random model and regime datasets")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("fit", help="fit the model to pooled CSV datasets")
    sp.add_argument("data", nargs="+", metavar="CSV")
    sp.add_argument("--baseline", action="store_true",
                    help="fit the pooled regression baseline instead")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="predict the mean outcome for a query")
    sp.add_argument("fit", metavar="FIT_JSON")
    sp.add_argument("query", metavar="QUERY_JSON")
    sp.add_argument("--cate", action="store_true",
                    help="average over the other treatments (one intervened treatment)")
    sp.add_argument("--n-mc", type=int, default=4096, metavar="N")
    sp.add_argument("--no-correction", action="store_true",
                    help="drop the conditional noise term")
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("verify", help="check the non-identifiability counterexamples")
    sp.add_argument("which", choices=["all", "s31", "g32", "cu"])
    sp.add_argument("--p", type=float)
    sp.add_argument("--n", type=int, help="Monte-Carlo draws for g32")
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("experiment", help="run a metrics sweep")
    sp.add_argument("kind", choices=["synthetic", "stroke"])
    sp.add_argument("--threads", type=int, default=1, metavar="N")
    common(sp)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("report", help="aggregate raw metrics CSVs")
    sp.add_argument("metrics", nargs="+", metavar="RAW_CSV")
    sp.add_argument("--out", metavar="DIR")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    if getattr(args, "n_mc", 1) < 1:
        parser.error("--n-mc must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, UsageError, InvalidDataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, DisentangleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
