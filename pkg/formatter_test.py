from formatter import format_convergence_html, format_convergence_summary
from harness import ConvergenceReport, NSummary, RouteRecord, SampleRecord


def _report():
    return ConvergenceReport(
        expression="((u1) + ((u1)^-1))",
        signature="d1=0 d2=1",
        reference="arcsine2",
        reference_kind="analytic",
        seed=7,
        n_list=[1, 20],
        samples_per_n=1,
        eps_list=[0.1],
        linearized_dim=6,
        samples=[
            SampleRecord(n=1, sample=0, in_domain=False, failure="inverse at <root>"),
            SampleRecord(
                n=20,
                sample=0,
                in_domain=True,
                ks=0.125,
                min_abs_pencil_eig=0.3,
                routes=[RouteRecord(eps=0.1, ks_between_routes=0.0, exact=True)],
            ),
        ],
        per_n=[
            NSummary(n=1, successes=0, status="all_samples_out_of_domain"),
            NSummary(n=20, successes=1, status="ok", mean_ks=0.125, max_ks=0.125, atom_extrapolated=0.0),
        ],
    )


def test_summary_sections():
    md = format_convergence_summary(_report(), run_id="abc")
    assert md.startswith("# Spectral convergence report")
    assert "| 20 | 1/1 | 0.125 | 0.125 | - | 0 | ok |" in md
    assert "| 1 | 0/1 | - | - | - | - | all_samples_out_of_domain |" in md
    assert "## Linearized route" in md
    assert "| 20 | 0 | 0.3 | 0.1 | 0 | yes |" in md
    assert "- N=1, sample 0: inverse at <root>" in md
    assert md.rstrip().endswith("_Run ID: `abc`_")


def test_summary_without_routes_or_failures():
    report = _report()
    report.samples = report.samples[1:]
    report.samples[0].routes = []
    md = format_convergence_summary(report)
    assert "## Linearized route" not in md
    assert "## Domain failures" not in md
    assert "Run ID" not in md


def test_html_renders_the_table():
    html = format_convergence_html(_report())
    assert "<h1>Spectral convergence report</h1>" in html
    assert "<table>" in html
