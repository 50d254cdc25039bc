# formatter.py
from typing import Optional

import markdown


def format_convergence_summary(report, run_id: Optional[str] = None) -> str:
    """
    Formats a convergence report into a markdown summary.

    Parameters:
        report (ConvergenceReport): Result of ``harness.run_convergence``.
        run_id (str, optional): Ledger id of the run.

    Returns:
        str: Markdown-formatted summary.
    """
    md = "# Spectral convergence report\n\n"
    md += f"- **Expression:** `{report.expression}`\n"
    md += f"- **Signature:** {report.signature}\n"
    md += f"- **Reference:** `{report.reference}` ({report.reference_kind})\n"
    md += f"- **Seed:** {report.seed}, **samples per N:** {report.samples_per_n}\n"
    if report.linearized_dim is not None:
        md += f"- **Self-adjoint pencil dimension:** {report.linearized_dim}\n"
    md += "\n"

    md += "| N | in domain | mean KS | max KS | Cauchy KS | atom at 0 (ε→0) | status |\n"
    md += "|---|---|---|---|---|---|---|\n"
    for row in report.per_n:
        md += (
            f"| {row.n} | {row.successes}/{report.samples_per_n} | {_num(row.mean_ks)} | {_num(row.max_ks)} "
            f"| {_num(row.cauchy_ks)} | {_num(row.atom_extrapolated)} | {row.status} |\n"
        )

    routes = [s for s in report.samples if s.routes]
    if routes:
        md += "\n## Linearized route\n\n"
        md += "| N | sample | min abs eig Q | ε | route KS | exact |\n"
        md += "|---|---|---|---|---|---|\n"
        for s in routes:
            for r in s.routes:
                md += (
                    f"| {s.n} | {s.sample} | {_num(s.min_abs_pencil_eig)} | {r.eps} "
                    f"| {_num(r.ks_between_routes)} | {'yes' if r.exact else 'no'} |\n"
                )

    failures = [s for s in report.samples if not s.in_domain]
    if failures:
        md += "\n## Domain failures\n"
        for s in failures:
            md += f"- N={s.n}, sample {s.sample}: {s.failure}\n"

    if run_id:
        md += f"\n---\n_Run ID: `{run_id}`_\n"

    return md


def format_convergence_html(report, run_id: Optional[str] = None) -> str:
    return markdown.markdown(format_convergence_summary(report, run_id), extensions=["tables"])


def _num(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4g}"
