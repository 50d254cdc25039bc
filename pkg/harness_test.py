import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from expr_core import ExprMatrix, Signature, x
from expr_parser import parse
from harness import (
    EXIT_NEGATIVE,
    EXIT_OK,
    EXIT_USAGE,
    ConvergenceReport,
    ExperimentConfig,
    NotSelfAdjointError,
    cli,
    estimate_inner_rank,
    run_convergence,
    test_fullness as check_fullness,
    test_nondegeneracy as check_nondegeneracy,
    worker_count,
)
from linearize import linearize, pencil_from_coefficients, schur_pencil
from matrix_eval import DomainFailureError
from randmat import rng_stream

EXPRESSIONS = Path(__file__).parent / "expressions"


def _config(tmp_path, name, **overrides):
    data = {
        "expr_path": str(EXPRESSIONS / f"{name}.expr"),
        "n_list": [20, 40],
        "samples_per_n": 2,
        "seed": 7,
        "output_dir": str(tmp_path / name),
    }
    data.update(overrides)
    return ExperimentConfig.model_validate(data)


# --- configuration ----------------------------------------------------------


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv("RATSPEC_THREADS", "3")
    assert worker_count() == 3
    assert worker_count(5) == 5
    monkeypatch.setenv("RATSPEC_THREADS", "many")
    with pytest.raises(ValueError):
        worker_count()
    monkeypatch.delenv("RATSPEC_THREADS")
    assert worker_count() >= 1
    with pytest.raises(ValueError):
        worker_count(0)


@pytest.mark.parametrize(
    "overrides",
    [
        {"n_list": [200, 100]},
        {"n_list": [100, 100]},
        {"n_list": []},
        {"samples_per_n": 0},
        {"eps_list": [0.1, -0.01]},
        {"reference": "cauchy"},
        {"expr": "x1"},
    ],
)
def test_config_validation(tmp_path, overrides):
    with pytest.raises(ValidationError):
        _config(tmp_path, "semicircle", **overrides)


def test_config_needs_an_expression():
    with pytest.raises(ValidationError):
        ExperimentConfig(n_list=[10])


def test_config_loads_inline_expression():
    config = ExperimentConfig(expr="x1 + inv(x2)", n_list=[10])
    expr, signature = config.load_expression()
    assert signature == Signature(2, 0)
    assert expr == parse("x1 + inv(x2)")


def test_config_signature_overrides_the_file():
    config = ExperimentConfig(expr_path=str(EXPRESSIONS / "semicircle.expr"), signature={"d1": 2, "d2": 1}, n_list=[4])
    assert config.load_expression()[1] == Signature(2, 1)


# --- convergence runs -------------------------------------------------------


def test_convergence_writes_report_and_csvs(tmp_path):
    config = _config(tmp_path, "arcsine", reference="arcsine2")
    report = run_convergence(config, threads=2)
    out = Path(config.output_dir)
    assert ConvergenceReport.model_validate_json((out / "report.json").read_text()) == report
    assert report.reference_kind == "analytic"
    assert report.linearized_dim == 6
    assert len(report.samples) == 4
    for s in report.samples:
        assert s.in_domain
        assert 0.0 <= s.ks <= 1.0
        assert (out / s.spectrum_file).is_file()
        assert len(s.routes) == len(config.eps_list)
    for row in report.per_n:
        assert row.status == "ok" and row.successes == 2
        assert row.mean_ks <= row.max_ks <= 1.0
        lines = (out / row.cdf_file).read_text().strip().splitlines()
        assert len(lines) >= 201
    assert report.per_n[0].cauchy_ks is None
    assert report.per_n[1].cauchy_ks is not None


def test_linearized_route_agrees_with_direct_evaluation(tmp_path):
    config = _config(tmp_path, "sum_then_invert", reference="inverse:semicircle:2.0", eps_list=[0.01, 1e-4])
    report = run_convergence(config, threads=1)
    routes = [r for s in report.samples for r in s.routes if r.exact]
    assert routes
    assert all(r.ks_between_routes <= 1e-6 for r in routes)


def test_report_is_independent_of_thread_count(tmp_path, monkeypatch):
    texts = []
    for threads in ("1", "4"):
        monkeypatch.setenv("RATSPEC_THREADS", threads)
        config = _config(tmp_path / threads, "arcsine", reference="arcsine2")
        run_convergence(config)
        texts.append((Path(config.output_dir) / "report.json").read_bytes())
    assert texts[0] == texts[1]


def test_surrogate_reference(tmp_path):
    report = run_convergence(_config(tmp_path, "semicircle", reference="surrogate", n_list=[10, 30]))
    assert report.reference_kind == "surrogate"
    assert all(s.ks is not None for s in report.samples)
    assert report.per_n[-1].cauchy_ks is not None


def test_dimensions_without_domain_points_are_reported(tmp_path):
    config = ExperimentConfig(
        expr="inv([[1i]] * (x1*x2 - x2*x1))",
        n_list=[1, 4],
        samples_per_n=3,
        reference="semicircle",
        output_dir=str(tmp_path / "commutator"),
        inv_tol=1e-6,
    )
    report = run_convergence(config)
    first, second = report.per_n
    assert first.status == "all_samples_out_of_domain" and first.successes == 0
    assert first.mean_ks is None
    assert second.status == "ok" and second.successes == 3
    assert all(s.failure for s in report.samples if s.n == 1)


def test_convergence_refuses_non_selfadjoint_expressions(tmp_path):
    config = _config(tmp_path, "bad", n_list=[4], reference="surrogate")
    with pytest.raises(NotSelfAdjointError):
        run_convergence(config)


def test_linearized_route_is_skipped_for_large_pencils(tmp_path):
    report = run_convergence(_config(tmp_path, "semicircle", reference="semicircle", linearized_max_dim=10))
    assert all(not s.routes and s.min_abs_pencil_eig is None for s in report.samples)


def test_run_is_recorded_in_the_ledger(tmp_path, monkeypatch):
    import db
    from sqlalchemy import create_engine
    from sqlalchemy.orm import sessionmaker

    engine = create_engine(f"sqlite:///{tmp_path / 'ledger.db'}")
    monkeypatch.setattr(db, "engine", engine)
    monkeypatch.setattr(db, "SessionLocal", sessionmaker(autocommit=False, autoflush=False, bind=engine))
    report = run_convergence(_config(tmp_path, "semicircle", reference="semicircle"), record=True)
    (run,) = db.list_runs()
    assert run.status == "completed"
    assert run.seed == 7
    assert run.max_n == 40
    assert run.mean_ks_at_max_n == pytest.approx(report.mean_ks_at_max_n())


@pytest.mark.slow
@pytest.mark.parametrize(
    "name, reference",
    [
        ("arcsine", "arcsine2"),
        ("inverse_semicircle", "inverse:semicircle"),
        ("sum_then_invert", "inverse:semicircle:2.0"),
        ("semicircle", "semicircle"),
    ],
)
def test_spectra_approach_the_analytic_law(tmp_path, name, reference):
    config = _config(tmp_path, name, reference=reference, n_list=[2000], samples_per_n=1, seed=1, linearized_max_dim=0)
    report = run_convergence(config)
    assert report.samples[0].in_domain
    assert report.samples[0].ks <= 0.05


@pytest.mark.slow
def test_arcsine_distance_shrinks_with_dimension(tmp_path):
    config = _config(tmp_path, "arcsine", reference="arcsine2", n_list=[200, 2000], samples_per_n=4, linearized_max_dim=0)
    small, large = run_convergence(config).per_n
    assert large.mean_ks < small.mean_ks


# --- probabilistic testers --------------------------------------------------


def test_commutator_inverse_needs_dimension_two():
    result = check_nondegeneracy(parse("inv(x1*x2 - x2*x1)"), n_list=[1, 2], trials=5, seed=3)
    assert result.found
    assert result.n == 2
    assert result.attempts[1] == 5
    assert result.attempts[2] <= 5
    assert result.witness.n == 2


def test_inverse_of_variable_has_a_scalar_witness():
    result = check_nondegeneracy(parse("inv(x1)"), n_list=[1, 2])
    assert result.found and result.n == 1


def test_identically_singular_inverse_has_no_witness():
    result = check_nondegeneracy(parse("inv(x1 - x1)"), n_list=[1, 2, 4], trials=3)
    assert not result.found
    assert result.witness is None
    assert result.attempts == {1: 3, 2: 3, 4: 3}


def _invertible_expression(rng):
    a, b, c = (round(float(v), 3) for v in rng.uniform(0.5, 2.0, size=3))
    templates = [
        f"x1 + {a} * inv(x2 + {b} * u1 + {b} * inv(u1))",
        f"{a} * u1 * x1 + inv(x2) * x1",
        f"inv(x1 * x2 + {c}) + {a} * u1",
        f"x1 * x2 - x2 * x1 + {a} * inv(u1)",
        f"{b} * x2 * u1 * x1 + {c}",
    ]
    return parse(templates[int(rng.integers(len(templates)))], Signature(2, 1))


def _factorized_pencil(rng, k=3):
    b = rng.standard_normal((k, k - 1))

    def coefficient():
        return b @ rng.standard_normal((k - 1, k))

    return pencil_from_coefficients(coefficient(), [coefficient(), coefficient()], [coefficient()])


def test_fullness_classifier():
    rng = rng_stream(2024)
    for trial in range(50):
        pencil = schur_pencil(linearize(_invertible_expression(rng)))
        assert check_fullness(pencil, n_list=[8], trials=5, seed=trial).full
    for trial in range(50):
        verdict = check_fullness(_factorized_pencil(rng), n_list=[8], trials=5, seed=trial)
        assert not verdict.full
        assert verdict.trials == 5


def test_fullness_examples():
    identity = check_fullness(pencil_from_coefficients(np.eye(2)))
    assert identity.full and identity.n == 1
    rank_one = check_fullness(pencil_from_coefficients(np.zeros((2, 2)), [np.ones((2, 2))]))
    assert not rank_one.full
    assert rank_one.best_scaled_min_sv < 1e-10
    assert check_fullness(linearize(parse("inv(x1)")).pencil).full


def test_inner_rank_of_rank_one_pattern():
    matrix = ExprMatrix(((x(1), x(1)), (x(1), x(1))), Signature(1, 0))
    estimate = estimate_inner_rank(matrix, n_list=[50, 100, 200], seed=4)
    assert estimate.exact_zero_fractions == [0.5, 0.5, 0.5]
    assert estimate.fraction == pytest.approx(0.5, abs=0.05)
    assert estimate.rank == 1
    assert estimate.p == 2


def test_inner_rank_of_diagonal_pattern():
    matrix = parse("[[x1, 0], [0, x2]]")
    estimate = estimate_inner_rank(matrix, n_list=[50, 100, 200], seed=4)
    assert estimate.exact_zero_fractions == [0.0, 0.0, 0.0]
    assert estimate.rank == 2


def test_inner_rank_of_single_variable():
    assert estimate_inner_rank(x(1), n_list=[40]).rank == 1


def test_inner_rank_propagates_domain_failures():
    with pytest.raises(DomainFailureError):
        estimate_inner_rank(parse("inv(x1 - x1)"), n_list=[4])


# --- command line -----------------------------------------------------------


def test_cli_linearize_prints_the_golden_representation(capsys):
    assert cli(["linearize", "--expr", str(EXPRESSIONS / "sum_inv.expr"), "--json"]) == EXIT_OK
    data = json.loads(capsys.readouterr().out)
    assert data["k"] == 3
    assert data["u"] == [[[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]]]


def test_cli_linearize_writes_output(tmp_path):
    assert cli(["linearize", "--expr", "x1 + inv(x2)", "--selfadjoint", "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "linearization.json").read_text())["k"] == 6


def test_cli_sa_check_verdicts():
    assert cli(["sa-check", "--expr", str(EXPRESSIONS / "bad.expr")]) == EXIT_NEGATIVE
    assert cli(["sa-check", "--expr", str(EXPRESSIONS / "arcsine.expr")]) == EXIT_OK


def test_cli_usage_errors():
    assert cli([]) == EXIT_USAGE
    assert cli(["parse"]) == EXIT_USAGE
    assert cli(["parse", "--expr", "x1 +"]) == EXIT_USAGE
    assert cli(["fullness"]) == EXIT_USAGE
    assert cli(["converge", "--expr", "x1", "--N", "20,10"]) == EXIT_USAGE


def test_cli_parse_json(capsys):
    assert cli(["parse", "--expr", "inv(x1 * u2) + x1", "--json"]) == EXIT_OK
    data = json.loads(capsys.readouterr().out)
    assert data["signature"] == {"d1": 1, "d2": 2}
    assert data["size"] == 6
    assert data["shape"] == [1, 1]


def test_cli_eval_reports_domain_failures(capsys):
    assert cli(["eval", "--expr", "inv(x1 - x1)", "--n", "3"]) == EXIT_NEGATIVE
    capsys.readouterr()
    assert cli(["eval", "--expr", "x1 * x1", "--n", "3", "--json"]) == EXIT_OK
    data = json.loads(capsys.readouterr().out)
    assert data["ok"] and data["N"] == 3


def test_cli_sample_then_eval(tmp_path):
    assert cli(["sample", "--d1", "2", "--n", "3", "--seed", "5", "--out", str(tmp_path)]) == EXIT_OK
    point = str(tmp_path / "point.json")
    assert cli(["eval", "--expr", str(EXPRESSIONS / "sum_inv.expr"), "--point", point]) == EXIT_OK


def test_cli_leaves_the_working_directory_untouched(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("RATSPEC_EXPRESSIONS_DIR", raising=False)
    assert cli(["parse", "--expr", "x1*x1"]) == EXIT_OK
    assert cli(["sa-check", "--expr", "x1*x1"]) == EXIT_OK
    assert cli(["linearize", "--expr", "x1 + inv(x2)", "--json"]) == EXIT_OK
    assert cli(["eval", "--expr", "x1 + inv(x2)", "--n", "3"]) == EXIT_OK
    assert list(tmp_path.iterdir()) == []


def test_cli_resolves_library_names(monkeypatch, capsys):
    monkeypatch.setenv("RATSPEC_EXPRESSIONS_DIR", str(EXPRESSIONS))
    assert cli(["parse", "--expr", "sum_inv", "--json"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["expression"] == "((x1) + ((x2)^-1))"


def test_cli_library_add(tmp_path, capsys):
    source = tmp_path / "square.expr"
    source.write_text("# square\nsignature: d1=1 d2=0\nx1*x1\n", encoding="utf-8")
    library = tmp_path / "lib"
    assert cli(["library", "--dir", str(library), "--add", str(source), "--json"]) == EXIT_OK
    (entry,) = json.loads(capsys.readouterr().out)["expressions"]
    assert entry["name"] == "square"
    assert (library / "square.expr").is_file()
    assert cli(["library", "--dir", str(library), "--add", str(tmp_path / "missing.expr")]) == EXIT_USAGE


def test_cli_fullness_of_expression_pencil(tmp_path):
    assert cli(["fullness", "--expr", "inv(x1)"]) == EXIT_OK
    pencil = tmp_path / "pencil.json"
    pencil.write_text(
        json.dumps({"k": 2, "A0": [[[0.0, 0.0]] * 2] * 2, "Aj": [[[[1.0, 0.0]] * 2] * 2]}),
        encoding="utf-8",
    )
    assert cli(["fullness", "--pencil", str(pencil)]) == EXIT_NEGATIVE


def test_cli_nondegeneracy_and_rank(capsys):
    assert cli(["nondegeneracy", "--expr", str(EXPRESSIONS / "commutator_inverse.expr"), "--N", "1,2", "--json"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["N"] == 2
    assert cli(["rank", "--expr", str(EXPRESSIONS / "rank_one_block.expr"), "--N", "50,100", "--json"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["rank"] == 1


def test_cli_converge(tmp_path, capsys):
    out = tmp_path / "run"
    argv = ["converge", "--expr", str(EXPRESSIONS / "arcsine.expr"), "--N", "20,40", "--samples", "2"]
    argv += ["--seed", "7", "--reference", "arcsine2", "--out", str(out), "--json", "--format", "markdown"]
    assert cli(argv) == EXIT_OK
    report = ConvergenceReport.model_validate_json(capsys.readouterr().out)
    assert report.seed == 7
    assert (out / "report.json").is_file()
    assert (out / "report.md").read_text().startswith("# Spectral convergence report")
    assert (out / "spectrum_N40_s1.csv").is_file()
    assert (out / "cdf_N20.csv").is_file()


def test_cli_converge_from_config_file(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(
        json.dumps({"expr": "x1", "n_list": [10], "samples_per_n": 1, "reference": "semicircle", "seed": 3}),
        encoding="utf-8",
    )
    out = tmp_path / "run"
    assert cli(["converge", "--config", str(config), "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "report.json").read_text())["seed"] == 3


def test_cli_converge_needs_force_for_non_selfadjoint(tmp_path):
    argv = ["converge", "--expr", str(EXPRESSIONS / "bad.expr"), "--N", "4", "--out", str(tmp_path)]
    assert cli(argv) == EXIT_NEGATIVE
