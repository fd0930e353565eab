import json

import numpy as np
import pytest

from disentangle.cli import main
from disentangle.model import load_scm


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


def tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file()}


SMALL_GEN = {"K": 2, "covariate_dim": 1,
             "regimes": [{"intervened": [], "n": 300}, {"intervened": [0, 1], "n": 300}]}


# --- gen -----------------------------------------------------------------------

def test_gen_default(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "--seed", 3, "--out", tmp_path)
    assert code == 0
    doc = json.loads((tmp_path / "scm.json").read_text())
    assert len(doc["sigma"]) == 25
    assert len(doc["theta"]["treatments"]) == 4 and len(doc["theta"]["outcome"]) == 37
    assert {p.name for p in tmp_path.glob("*.csv")} == {"obs.csv", "do_0_1.csv",
                                                        "do_1_2.csv", "do_2_3.csv"}


def test_gen_empty_regime(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", {"K": 1, "covariate_dim": 1,
                                           "regimes": [{"intervened": [0], "n": 0}]})
    assert run(capsys, "gen", "--config", cfg, "--out", tmp_path / "o")[0] == 0
    assert (tmp_path / "o" / "do_0.csv").read_text() == "regime_id,c_0,x_0,i_0,y\n"


def test_gen_same_seed_identical(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", SMALL_GEN)
    for d in ("a", "b"):
        run(capsys, "gen", "--config", cfg, "--seed", 11, "--out", tmp_path / d)
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    run(capsys, "gen", "--config", cfg, "--seed", 12, "--out", tmp_path / "c")
    assert tree(tmp_path / "a") != tree(tmp_path / "c")


def test_gen_schema_error_names_field(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", {"K": 2, "regimes": [{"intervened": [0], "n": -1}]})
    code, _, err = run(capsys, "gen", "--config", cfg, "--out", tmp_path / "o")
    assert code == 1
    assert "/regimes/0/n" in err


def test_gen_intervention_out_of_range(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", {"K": 2, "regimes": [{"intervened": [5], "n": 3}]})
    code, _, err = run(capsys, "gen", "--config", cfg, "--out", tmp_path / "o")
    assert code == 1 and "/regimes/0/intervened" in err


@pytest.mark.parametrize("seed", ["-1", str(2 ** 64), "abc"])
def test_bad_seed_is_usage_error(tmp_path, seed, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["gen", "--seed", seed, "--out", str(tmp_path)])
    assert ei.value.code == 1


def test_unknown_subcommand(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["frobnicate"])
    assert ei.value.code == 1


# --- fit / predict -------------------------------------------------------------

@pytest.fixture
def generated(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", SMALL_GEN)
    run(capsys, "gen", "--config", cfg, "--seed", 5, "--out", tmp_path / "data")
    return tmp_path / "data"


def test_fit_writes_report(generated, tmp_path, capsys):
    code, out, _ = run(capsys, "fit", generated / "obs.csv", generated / "do_0_1.csv",
                       "--out", tmp_path / "fit")
    assert code == 0
    doc = json.loads((tmp_path / "fit" / "fit.json").read_text())
    assert set(doc) >= {"theta", "sigma", "ll_trace", "converged", "iterations"}
    summary = (tmp_path / "fit" / "fit_summary.txt").read_text()
    assert "final log-likelihood" in summary and "iterations" in summary
    assert summary == out


def test_fit_baseline_flag(generated, tmp_path, capsys):
    code, _, _ = run(capsys, "fit", generated / "obs.csv", generated / "do_0_1.csv",
                     "--baseline", "--out", tmp_path / "fit")
    assert code == 0
    assert (tmp_path / "fit" / "baseline_fit.json").exists()
    assert not (tmp_path / "fit" / "fit.json").exists()


def test_fit_bad_row_reports_line(generated, tmp_path, capsys):
    lines = (generated / "obs.csv").read_text().splitlines()
    lines[3] = lines[3] + ",9"
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "fit", bad, "--out", tmp_path / "fit")
    assert code == 1
    assert f"{bad}:4:" in err


def test_fit_underdetermined_is_numeric_failure(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", {"K": 2, "covariate_dim": 2,
                                           "regimes": [{"intervened": [], "n": 3}]})
    run(capsys, "gen", "--config", cfg, "--out", tmp_path / "d")
    code, _, err = run(capsys, "fit", tmp_path / "d" / "obs.csv", "--baseline",
                       "--out", tmp_path / "f")
    assert code == 3 and "numerical failure" in err


@pytest.fixture
def fitted(generated, tmp_path, capsys):
    run(capsys, "fit", generated / "obs.csv", generated / "do_0_1.csv", "--out",
        tmp_path / "fit")
    return tmp_path / "fit" / "fit.json"


def test_predict_all_intervened_is_f_y(fitted, tmp_path, capsys):
    from disentangle.estimate import FitReport
    q = write_json(tmp_path / "q.json", {"c": [0.3], "do": {"0": 1.0, "1": -2.0}})
    code, out, _ = run(capsys, "predict", fitted, q)
    assert code == 0
    rep = FitReport.load(fitted)
    assert float(out) == float(rep.outcome_mean(np.array([[0.3]]), np.array([[1.0, -2.0]]))[0])


def test_predict_correction_flag(fitted, tmp_path, capsys):
    q = write_json(tmp_path / "q.json", {"c": [0.3], "do": {"1": -2.0}, "obs": {"0": 3.0}})
    with_c = float(run(capsys, "predict", fitted, q)[1])
    without = float(run(capsys, "predict", fitted, q, "--no-correction")[1])
    assert with_c != without


def test_predict_writes_json(fitted, tmp_path, capsys):
    q = write_json(tmp_path / "q.json", {"c": [0.3], "do": {"0": 1.0, "1": 0.0}})
    code, out, _ = run(capsys, "predict", fitted, q, "--out", tmp_path / "p")
    doc = json.loads((tmp_path / "p" / "prediction.json").read_text())
    assert code == 0 and doc["prediction"] == float(out) and doc["kind"] == "mean"


def test_predict_dimension_mismatch(fitted, tmp_path, capsys):
    q = write_json(tmp_path / "q.json", {"c": [0.3, 1.0], "do": {"0": 1.0, "1": 0.0}})
    assert run(capsys, "predict", fitted, q)[0] == 1
    q = write_json(tmp_path / "q2.json", {"c": [0.3], "do": {"0": 1.0}})
    assert run(capsys, "predict", fitted, q)[0] == 1


def test_predict_cate_k1(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", {"K": 1, "covariate_dim": 1, "regimes": [
        {"intervened": [], "n": 200}, {"intervened": [0], "n": 200}]})
    run(capsys, "gen", "--config", cfg, "--out", tmp_path / "d")
    run(capsys, "fit", tmp_path / "d" / "obs.csv", tmp_path / "d" / "do_0.csv",
        "--out", tmp_path / "f")
    q = write_json(tmp_path / "q.json", {"c": [0.5], "do": {"0": 1.5}})
    fit = tmp_path / "f" / "fit.json"
    a = float(run(capsys, "predict", fit, q)[1])
    b = float(run(capsys, "predict", fit, q, "--cate", "--n-mc", 64)[1])
    assert a == pytest.approx(b, abs=1e-12)


def test_zero_noise_round_trip(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", {**SMALL_GEN, "noise_scale": 0})
    run(capsys, "gen", "--config", cfg, "--seed", 2, "--out", tmp_path / "d")
    code, _, _ = run(capsys, "fit", tmp_path / "d" / "obs.csv", tmp_path / "d" / "do_0_1.csv",
                     "--out", tmp_path / "f")
    assert code == 0
    scm = load_scm(tmp_path / "d" / "scm.json")
    r = np.random.default_rng(0)
    # without noise an observed treatment can only sit at its structural mean
    for k in range(6):
        c, x = r.normal(size=1), r.normal(size=2)
        if k % 2:
            x[0] = scm.treatment_means(c[None])[0, 0]
            doc = {"c": c.tolist(), "do": {"1": x[1]}, "obs": {"0": x[0]}}
        else:
            doc = {"c": c.tolist(), "do": {"0": x[0], "1": x[1]}}
        q = write_json(tmp_path / f"q{k}.json", doc)
        got = float(run(capsys, "predict", tmp_path / "f" / "fit.json", q)[1])
        truth = float(scm.outcome_mean(c[None], x[None])[0])
        assert got == pytest.approx(truth, abs=1e-3)


# --- verify --------------------------------------------------------------------

def test_verify_s31(tmp_path, capsys):
    code, out, _ = run(capsys, "verify", "s31", "--p", 0.3, "--out", tmp_path)
    assert code == 0 and "s31: pass" in out
    doc = json.loads((tmp_path / "verify_s31.json").read_text())
    tv = {c["regime"]: c["tv_distance"] for c in doc["checks"]}
    assert tv["do(X1)"] == pytest.approx(0.3, abs=1e-12)


def test_verify_g32(tmp_path, capsys):
    code, out, _ = run(capsys, "verify", "g32", "--n", 200_000, "--out", tmp_path)
    assert code == 0
    doc = json.loads((tmp_path / "verify_g32.json").read_text())
    d = doc["details"]["regimes"]["do(X1=1.0)"]
    assert d["mean_M"] == pytest.approx(1, abs=0.03)
    assert d["mean_M_prime"] == pytest.approx(2, abs=0.03)


def test_verify_cu_boundary(tmp_path, capsys):
    code, out, _ = run(capsys, "verify", "cu", "--p", 1.0, "--out", tmp_path)
    assert code == 0 and "unresolved" in out
    doc = json.loads((tmp_path / "verify_cu.json").read_text())
    assert doc["details"]["claimed"]["gap"] == 0


@pytest.mark.parametrize("argv", [["s31", "--p", "1.5"], ["s31", "--p", "1.0"],
                                  ["g32", "--n", "10"]])
def test_verify_bad_params(argv, capsys):
    assert run(capsys, "verify", *argv)[0] == 1


def test_verify_failure_exit_code(monkeypatch, capsys):
    from disentangle import identify
    monkeypatch.setattr(identify, "verify_section31", lambda p, strict=False: identify.Report(
        "s31", [identify.Check("obs", 0.5, "equal")]))
    code, _, err = run(capsys, "verify", "s31")
    assert code == 2 and "obs" in err


# --- experiment / report -------------------------------------------------------

SYN = {"sizes": [32, 256], "seeds": 2, "eval_n": 500, "fit": {"max_outer": 5}}


def test_experiment_synthetic_reduced(tmp_path, capsys):
    cfg = write_json(tmp_path / "s.json", SYN)
    code, out, _ = run(capsys, "experiment", "synthetic", "--config", cfg, "--out", tmp_path / "a")
    assert code == 0 and "oracle" in out
    rows = (tmp_path / "a" / "synthetic_raw.csv").read_text().splitlines()
    assert len(rows) - 1 == 2 * 2 * 16 * 3
    run(capsys, "experiment", "synthetic", "--config", cfg, "--out", tmp_path / "b")
    assert tree(tmp_path / "a") == tree(tmp_path / "b")

    code, out, _ = run(capsys, "report", tmp_path / "a" / "synthetic_raw.csv",
                       "--out", tmp_path / "r")
    assert code == 0
    assert (tmp_path / "r" / "report_agg.csv").read_bytes() == \
        (tmp_path / "a" / "synthetic_agg.csv").read_bytes()


def test_experiment_stroke_small(tmp_path, capsys):
    cfg = write_json(tmp_path / "s.json", {"bounds": [0.0, 0.4], "seeds": 2, "n_eval": 300})
    code, out, _ = run(capsys, "experiment", "stroke", "--config", cfg, "--out", tmp_path)
    assert code == 0
    head = (tmp_path / "stroke_raw.csv").read_text().splitlines()[0]
    assert head.endswith(",bound")


def test_experiment_config_validated(tmp_path, capsys):
    cfg = write_json(tmp_path / "s.json", {"seeds": 0})
    code, _, err = run(capsys, "experiment", "synthetic", "--config", cfg, "--out", tmp_path)
    assert code == 1 and "/seeds" in err
