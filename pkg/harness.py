"""
Experiment runner and command line for the rational-expression pipeline.

``run_convergence`` evaluates a self-adjoint expression at random matrix tuples
of growing dimension and measures the Kolmogorov distance of the empirical
spectra to a reference law; the probabilistic testers certify non-degeneracy,
fullness and self-adjointness by sampling.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from tqdm import tqdm

from codec import MatrixTupleModel, PencilModel, encode_matrix, rep_from_json, rep_to_json, tuple_from_json, tuple_to_json
from expr_core import (
    ExprError,
    ExprMatrix,
    NoSampleInDomain,
    RationalExpr,
    Signature,
    check_signature,
    infer_signature,
    is_selfadjoint_multi,
    lift_matrix,
    shape,
    variables,
    depth,
    size,
)
from expr_parser import ExprSyntaxError, load_expr_file, parse, render
from expression_library import ExpressionLibrary, find_expression_file
from linearize import (
    AffinePencil,
    FormalLinRep,
    SaLinRep,
    linearize,
    make_selfadjoint_rep,
    normalize_weight,
    schur_pencil,
)
from matrix_eval import (
    DomainFailureError,
    MatrixTuple,
    eval_expr,
    eval_pencil,
    scaled_min_singular_value,
)
from randmat import EnsembleSpec, sample_tuple
from spectral import (
    DEFAULT_EPS_SCHEDULE,
    EmpiricalSpectrum,
    atom_extrapolation,
    hermitian_eigenvalues,
    kolmogorov_distance,
    law_from_spec,
    regularized_inverse_from_eigh,
    symmetrize,
    write_cdf_csv,
    write_spectrum_csv,
)

logger = logging.getLogger(__name__)

FULLNESS_THRESHOLD = 1e-10
ZERO_EIGENVALUE_RTOL = 1e-9
ROUTE_RTOL = 1e-8
CDF_GRID_POINTS = 201

EXIT_OK = 0
EXIT_NEGATIVE = 1
EXIT_USAGE = 2


class NotSelfAdjointError(ExprError):
    pass


def worker_count(threads: Optional[int] = None) -> int:
    """Worker cap: explicit value, else ``RATSPEC_THREADS``, else the CPU count."""
    if threads is not None:
        value = threads
    else:
        raw = os.getenv("RATSPEC_THREADS")
        if raw is None or raw.strip() == "":
            return os.cpu_count() or 1
        try:
            value = int(raw)
        except ValueError:
            raise ValueError(f"RATSPEC_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"Worker count must be >= 1, got {value}")
    return value


class SignatureModel(BaseModel):
    d1: int = Field(ge=0)
    d2: int = Field(ge=0)

    def to_signature(self) -> Signature:
        return Signature(self.d1, self.d2)


_REFERENCE_HEADS = ("semicircle", "arcsine2", "inverse", "tabulated", "surrogate")


class ExperimentConfig(BaseModel):
    expr: Optional[str] = None
    expr_path: Optional[str] = None
    signature: Optional[SignatureModel] = None
    ensemble: EnsembleSpec = Field(default_factory=EnsembleSpec)
    n_list: List[int]
    samples_per_n: int = Field(default=1, ge=1)
    eps_list: List[float] = Field(default_factory=lambda: list(DEFAULT_EPS_SCHEDULE))
    reference: str = "surrogate"
    seed: int = Field(default=0, ge=0)
    output_dir: Optional[str] = None
    force: bool = False
    linearized_max_dim: int = Field(default=3000, ge=0)
    inv_tol: float = Field(default=1e-10, gt=0)

    @field_validator("n_list")
    @classmethod
    def strictly_increasing(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("n_list must not be empty")
        if value[0] < 1 or any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError(f"n_list must be strictly increasing positive integers, got {value}")
        return value

    @field_validator("eps_list")
    @classmethod
    def positive_eps(cls, value: List[float]) -> List[float]:
        if not value or any(e <= 0 for e in value):
            raise ValueError(f"eps_list must be non-empty and positive, got {value}")
        return value

    @field_validator("reference")
    @classmethod
    def known_reference(cls, value: str) -> str:
        if value.split(":", 1)[0].strip() not in _REFERENCE_HEADS:
            raise ValueError(f"Unknown reference {value!r}; expected one of {', '.join(_REFERENCE_HEADS)}")
        return value

    @model_validator(mode="after")
    def one_source(self) -> "ExperimentConfig":
        if (self.expr is None) == (self.expr_path is None):
            raise ValueError("Exactly one of expr and expr_path must be given")
        return self

    def load_expression(self) -> Tuple[RationalExpr, Signature]:
        declared = self.signature.to_signature() if self.signature else None
        if self.expr_path is not None:
            expr, signature = load_expr_file(self.expr_path)
            signature = declared or signature
            check_signature(expr, signature)
            return expr, signature
        expr = parse(self.expr, declared)
        return expr, declared or infer_signature(expr)


class RouteRecord(BaseModel):
    eps: float
    ks_between_routes: float
    exact: bool


class SampleRecord(BaseModel):
    n: int
    sample: int
    in_domain: bool
    ks: Optional[float] = None
    spectrum_file: Optional[str] = None
    failure: Optional[str] = None
    min_abs_pencil_eig: Optional[float] = None
    routes: List[RouteRecord] = []


class AtomRecord(BaseModel):
    eps: float
    fraction: float


class NSummary(BaseModel):
    n: int
    successes: int
    status: str
    mean_ks: Optional[float] = None
    max_ks: Optional[float] = None
    cauchy_ks: Optional[float] = None
    atom_fractions: List[AtomRecord] = []
    atom_extrapolated: Optional[float] = None
    cdf_file: Optional[str] = None


class ConvergenceReport(BaseModel):
    expression: str
    signature: str
    reference: str
    reference_kind: str
    seed: int
    n_list: List[int]
    samples_per_n: int
    eps_list: List[float]
    linearized_dim: Optional[int] = None
    samples: List[SampleRecord] = []
    per_n: List[NSummary] = []

    def mean_ks_at_max_n(self) -> Optional[float]:
        for row in reversed(self.per_n):
            if row.mean_ks is not None:
                return row.mean_ks
        return None

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), indent=2, sort_keys=True) + "\n"


@dataclass
class _SampleResult:
    record: SampleRecord
    spectrum: Optional[EmpiricalSpectrum] = None


@dataclass
class _RunContext:
    expr: RationalExpr
    spec: EnsembleSpec
    sa_rep: Optional[SaLinRep]
    eps_list: List[float]
    inv_tol: float
    linearized_max_dim: int
    output_dir: Optional[Path]


def _linearized_routes(ctx: _RunContext, point: MatrixTuple, direct: EmpiricalSpectrum):
    rep = ctx.sa_rep
    values, vectors = scipy.linalg.eigh(symmetrize(eval_pencil(rep.pencil, point)), check_finite=False)
    min_abs = float(np.min(np.abs(values)))
    w = np.kron(rep.w, np.eye(point.n))
    atol = ROUTE_RTOL * (1.0 + float(np.max(np.abs(direct.eigenvalues))))
    routes = []
    for eps in ctx.eps_list:
        rebuilt = w.conj().T @ regularized_inverse_from_eigh(values, vectors, eps) @ w
        spectrum = hermitian_eigenvalues(rebuilt)
        routes.append(RouteRecord(eps=eps, ks_between_routes=kolmogorov_distance(direct, spectrum, atol=atol), exact=min_abs > eps))
    return min_abs, routes


def _run_sample(ctx: _RunContext, n: int, sample_index: int) -> _SampleResult:
    point = sample_tuple(ctx.spec.at(n), sample_index)
    outcome = eval_expr(ctx.expr, point, ctx.inv_tol)
    if not outcome.ok:
        return _SampleResult(SampleRecord(n=n, sample=sample_index, in_domain=False, failure=outcome.failure.describe()))
    spectrum = hermitian_eigenvalues(outcome.value)
    record = SampleRecord(n=n, sample=sample_index, in_domain=True)
    if ctx.sa_rep is not None and ctx.sa_rep.k * n <= ctx.linearized_max_dim:
        record.min_abs_pencil_eig, record.routes = _linearized_routes(ctx, point, spectrum)
    if ctx.output_dir is not None:
        name = f"spectrum_N{n}_s{sample_index}.csv"
        write_spectrum_csv(spectrum, ctx.output_dir / name)
        record.spectrum_file = name
    return _SampleResult(record, spectrum)


def _cdf_grid(spectrum: EmpiricalSpectrum) -> np.ndarray:
    lo, hi = np.quantile(spectrum.eigenvalues, [0.005, 0.995])
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    return np.linspace(lo, hi, CDF_GRID_POINTS)


def run_convergence(
    config: ExperimentConfig, threads: Optional[int] = None, record: bool = False, progress: bool = False
) -> ConvergenceReport:
    """Run the convergence study described by ``config``.

    Raises:
        NotSelfAdjointError: if the expression fails the randomized self-adjointness check
            (skipped with ``config.force``)
    """
    expr, signature = config.load_expression()
    if not config.force:
        try:
            verdict = is_selfadjoint_multi(expr, n_list=(2, 4), trials=10, seed=config.seed, signature=signature)
        except NoSampleInDomain:
            logger.warning("Self-adjointness check found no sample in the domain; continuing")
        else:
            if not verdict.selfadjoint:
                raise NotSelfAdjointError(f"{render(expr)} is not self-adjoint (defect {verdict.max_defect:.3e})")

    law = law_from_spec(config.reference)
    sa_rep = make_selfadjoint_rep(linearize(expr, signature), signature) if shape(expr)[0] == shape(expr)[1] else None
    spec = config.ensemble.model_copy(update={"d1": signature.d1, "d2": signature.d2, "seed": config.seed})
    if spec.selfadj_models is not None and len(spec.selfadj_models) != signature.d1:
        raise ValueError(f"Ensemble lists {len(spec.selfadj_models)} self-adjoint models for d1={signature.d1}")
    output_dir = Path(config.output_dir) if config.output_dir else None
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)

    ctx = _RunContext(expr, spec, sa_rep, list(config.eps_list), config.inv_tol, config.linearized_max_dim, output_dir)
    workers = worker_count(threads)

    run_id = None
    if record:
        import db

        run_id = db.start_run(render(expr), config.seed, config.model_dump_json(), config.output_dir)

    try:
        report = _collect(config, ctx, law, signature, workers, progress)
    except Exception as e:
        if record:
            db.finish_run(run_id, "failed", error_message=str(e))
        raise

    if output_dir is not None:
        (output_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    if record:
        db.finish_run(run_id, "completed", max(config.n_list), report.mean_ks_at_max_n())
    return report


def _collect(config, ctx, law, signature, workers, progress) -> ConvergenceReport:
    expr = ctx.expr
    samples: List[SampleRecord] = []
    spectra: Dict[int, List[EmpiricalSpectrum]] = {}
    by_sample: Dict[Tuple[int, int], EmpiricalSpectrum] = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for n in tqdm(config.n_list, desc="N", disable=not progress):
            results = list(pool.map(lambda s, n=n: _run_sample(ctx, n, s), range(config.samples_per_n)))
            samples.extend(r.record for r in results)
            spectra[n] = [r.spectrum for r in results if r.spectrum is not None]
            by_sample.update({(n, r.record.sample): r.spectrum for r in results if r.spectrum is not None})
            logger.info("N=%d: %d/%d samples in the domain", n, len(spectra[n]), config.samples_per_n)
            if not spectra[n]:
                logger.warning("All samples out of the domain at N=%d; continuing with larger N", n)

    reference = law
    reference_kind = "analytic"
    if law is None:
        reference_kind = "surrogate"
        largest = [n for n in config.n_list if spectra[n]]
        reference = EmpiricalSpectrum.pooled(spectra[largest[-1]]) if largest else None

    if reference is not None:
        for s in samples:
            if s.in_domain:
                s.ks = kolmogorov_distance(by_sample[(s.n, s.sample)], reference)

    per_n = []
    previous: Optional[EmpiricalSpectrum] = None
    for n in config.n_list:
        rows = [s for s in samples if s.n == n and s.in_domain]
        summary = NSummary(n=n, successes=len(rows), status="ok" if rows else "all_samples_out_of_domain")
        if rows:
            pooled = EmpiricalSpectrum.pooled(spectra[n])
            ks_values = [s.ks for s in rows if s.ks is not None]
            if ks_values:
                summary.mean_ks = float(np.mean(ks_values))
                summary.max_ks = float(np.max(ks_values))
            atoms = atom_extrapolation(pooled, 0.0, config.eps_list)
            summary.atom_fractions = [AtomRecord(eps=e, fraction=f) for e, f in zip(atoms.eps_list, atoms.fractions)]
            summary.atom_extrapolated = atoms.extrapolated
            if previous is not None:
                summary.cauchy_ks = kolmogorov_distance(previous, pooled)
            previous = pooled
            if ctx.output_dir is not None:
                grid = _cdf_grid(pooled)
                name = f"cdf_N{n}.csv"
                write_cdf_csv(grid, pooled.cdf(grid), ctx.output_dir / name)
                summary.cdf_file = name
        per_n.append(summary)

    return ConvergenceReport(
        expression=render(expr),
        signature=str(signature),
        reference=config.reference,
        reference_kind=reference_kind,
        seed=config.seed,
        n_list=list(config.n_list),
        samples_per_n=config.samples_per_n,
        eps_list=list(config.eps_list),
        linearized_dim=ctx.sa_rep.k if ctx.sa_rep is not None else None,
        samples=samples,
        per_n=per_n,
    )


@dataclass
class NondegeneracyResult:
    found: bool
    n: Optional[int] = None
    witness: Optional[MatrixTuple] = None
    attempts: Dict[int, int] = field(default_factory=dict)


def test_nondegeneracy(
    expr: RationalExpr,
    n_list: Sequence[int],
    trials: int = 5,
    seed: int = 0,
    signature: Optional[Signature] = None,
    inv_tol: float = 1e-10,
) -> NondegeneracyResult:
    """Scan ``n_list`` for the first dimension with a random point in the domain.

    Not finding one is evidence, never proof, of degeneracy.
    """
    signature = signature or infer_signature(expr)
    check_signature(expr, signature)
    attempts: Dict[int, int] = {}
    for n in n_list:
        spec = EnsembleSpec(d1=signature.d1, d2=signature.d2, n=n, seed=seed)
        for trial in range(trials):
            attempts[n] = trial + 1
            point = sample_tuple(spec, trial)
            if eval_expr(expr, point, inv_tol).ok:
                logger.info("Domain witness at N=%d after %d trial(s)", n, trial + 1)
                return NondegeneracyResult(True, n, point, attempts)
        logger.info("No domain witness at N=%d in %d trials", n, trials)
    return NondegeneracyResult(False, attempts=attempts)


test_nondegeneracy.__test__ = False


@dataclass
class FullnessVerdict:
    full: bool
    n: Optional[int] = None
    witness: Optional[MatrixTuple] = None
    best_scaled_min_sv: float = 0.0
    trials: int = 0


def test_fullness(
    pencil: AffinePencil,
    n_list: Sequence[int] = (1, 2, 4, 8),
    trials: int = 5,
    seed: int = 0,
    threshold: float = FULLNESS_THRESHOLD,
) -> FullnessVerdict:
    """Full if the pencil is invertible at some random Hermitian/unitary point.

    Invertibility is judged by the scaled smallest singular value of the
    row-normalized evaluation against ``threshold``.
    """
    best = 0.0
    count = 0
    for n in n_list:
        spec = EnsembleSpec(d1=pencil.d1, d2=pencil.d2, n=n, seed=seed)
        for trial in range(trials):
            count += 1
            point = sample_tuple(spec, trial)
            value = scaled_min_singular_value(eval_pencil(pencil, point))
            best = max(best, value)
            if value >= threshold:
                return FullnessVerdict(True, n, point, best, count)
    return FullnessVerdict(False, None, None, best, count)


test_fullness.__test__ = False


@dataclass
class InnerRankEstimate:
    rank: int
    p: int
    fraction: float
    n_list: List[int]
    extrapolated: List[float]
    exact_zero_fractions: List[float]
    window_fractions: List[List[float]]


def estimate_inner_rank(
    expr_matrix: Union[ExprMatrix, RationalExpr],
    n_list: Sequence[int] = (50, 100, 200),
    eps_list: Sequence[float] = DEFAULT_EPS_SCHEDULE,
    seed: int = 0,
    signature: Optional[Signature] = None,
    inv_tol: float = 1e-10,
) -> InnerRankEstimate:
    """Inner rank from the proportion of zero eigenvalues of a self-adjoint p×p matrix of expressions.

    Raises:
        DomainFailureError: if a sampled point is outside the domain
    """
    expr = lift_matrix(expr_matrix) if isinstance(expr_matrix, ExprMatrix) else expr_matrix
    p = shape(expr)[0]
    signature = signature or (expr_matrix.signature if isinstance(expr_matrix, ExprMatrix) else None) or infer_signature(expr)
    extrapolated, exact, windows = [], [], []
    for n in n_list:
        point = sample_tuple(EnsembleSpec(d1=signature.d1, d2=signature.d2, n=n, seed=seed))
        spectrum = hermitian_eigenvalues(eval_expr(expr, point, inv_tol).unwrap())
        atoms = atom_extrapolation(spectrum, 0.0, eps_list)
        extrapolated.append(atoms.extrapolated)
        windows.append(atoms.fractions)
        scale = float(np.max(np.abs(spectrum.eigenvalues))) if spectrum.dim else 0.0
        zeros = np.count_nonzero(np.abs(spectrum.eigenvalues) <= ZERO_EIGENVALUE_RTOL * scale)
        exact.append(zeros / spectrum.dim)
    fraction = extrapolated[-1]
    rank = int(round(p * (1.0 - fraction)))
    return InnerRankEstimate(rank, p, fraction, list(n_list), extrapolated, exact, windows)


# --- command line -----------------------------------------------------------


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _load_expr(source: str, d1: Optional[int] = None, d2: Optional[int] = None) -> Tuple[RationalExpr, Signature]:
    """An expression file, a library name, or inline text with ``--d1/--d2``."""
    declared = Signature(d1 or 0, d2 or 0) if (d1 or d2) else None
    path = Path(source)
    if path.is_file():
        expr, signature = load_expr_file(path)
        return expr, declared or signature
    library_file = find_expression_file(source)
    if library_file is not None:
        expr, signature = load_expr_file(library_file)
        return expr, declared or signature
    expr = parse(source, declared)
    return expr, declared or infer_signature(expr)


def _expr_source(source: str) -> Dict[str, str]:
    if Path(source).is_file():
        return {"expr_path": source}
    library_file = find_expression_file(source)
    if library_file is not None:
        return {"expr_path": str(library_file)}
    return {"expr": source}


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print(text)


def _cmd_parse(args) -> int:
    expr, signature = _load_expr(args.expr, args.d1, args.d2)
    rows, cols = shape(expr)
    payload = {
        "expression": render(expr),
        "signature": {"d1": signature.d1, "d2": signature.d2},
        "shape": [rows, cols],
        "depth": depth(expr),
        "size": size(expr),
        "variables": [v.name for v in variables(expr)],
    }
    _emit(args, payload, render(expr))
    return EXIT_OK


def _cmd_linearize(args) -> int:
    expr, signature = _load_expr(args.expr, args.d1, args.d2)
    rep: Union[FormalLinRep, SaLinRep] = linearize(expr, signature, compact_atoms=not args.no_compact)
    if args.schur:
        text = PencilModel.from_pencil(schur_pencil(rep)).model_dump_json(indent=2)
    else:
        if args.selfadjoint or args.normalize:
            rep = make_selfadjoint_rep(rep, signature)
        if args.normalize:
            rep = normalize_weight(rep)
        text = rep_to_json(rep)
    if args.json:
        print(text)
    else:
        kind = "bordered pencil" if args.schur else type(rep).__name__
        print(f"{kind} of dimension {json.loads(text)['k']} for {render(expr)}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "linearization.json").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def _cmd_eval(args) -> int:
    expr, signature = _load_expr(args.expr, args.d1, args.d2)
    if args.point:
        point = tuple_from_json(Path(args.point).read_text(encoding="utf-8"))
    else:
        point = sample_tuple(EnsembleSpec(d1=signature.d1, d2=signature.d2, n=args.n, seed=args.seed), args.sample_index)
    outcome = eval_expr(expr, point, args.inv_tol)
    if not outcome.ok:
        _emit(args, {"ok": False, "failure": outcome.failure.describe()}, f"Domain failure: {outcome.failure.describe()}")
        return EXIT_NEGATIVE
    _emit(args, {"ok": True, "N": point.n, "value": encode_matrix(outcome.value)}, np.array2string(outcome.value, precision=6))
    return EXIT_OK


def _cmd_sample(args) -> int:
    if args.ensemble:
        spec = EnsembleSpec.model_validate_json(Path(args.ensemble).read_text(encoding="utf-8"))
        spec = spec.model_copy(update={"seed": args.seed})
    else:
        spec = EnsembleSpec(d1=args.d1 or 0, d2=args.d2 or 0, n=args.n, seed=args.seed)
    point = sample_tuple(spec, args.sample_index)
    text = tuple_to_json(point)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "point.json").write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def _cmd_converge(args) -> int:
    from formatter import format_convergence_html, format_convergence_summary

    if args.config:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    else:
        data = {}
    overrides = {
        "n_list": args.N,
        "samples_per_n": args.samples,
        "eps_list": args.eps,
        "reference": args.reference,
        "output_dir": args.out,
        "linearized_max_dim": args.linearized_max_dim,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.expr:
        data.pop("expr", None)
        data.pop("expr_path", None)
        data.update(_expr_source(args.expr))
    if args.seed_given or "seed" not in data:
        data["seed"] = args.seed
    data["force"] = bool(args.force or data.get("force", False))
    data.setdefault("output_dir", "ratspec_out")
    config = ExperimentConfig.model_validate(data)

    try:
        report = run_convergence(config, threads=args.threads, record=args.record, progress=not args.json)
    except NotSelfAdjointError as e:
        logger.error("%s (use --force to run anyway)", e)
        return EXIT_NEGATIVE

    out = Path(config.output_dir)
    if args.format == "markdown":
        (out / "report.md").write_text(format_convergence_summary(report), encoding="utf-8")
    elif args.format == "html":
        (out / "report.html").write_text(format_convergence_html(report), encoding="utf-8")
    if args.json:
        print(report.to_json(), end="")
    else:
        print(format_convergence_summary(report))
    return EXIT_OK


def _pencil_from_args(args) -> AffinePencil:
    if args.pencil:
        text = Path(args.pencil).read_text(encoding="utf-8")
        data = json.loads(text)
        if "u" in data or "w" in data:
            return rep_from_json(text).pencil
        return PencilModel.model_validate(data).to_pencil()
    expr, signature = _load_expr(args.expr, args.d1, args.d2)
    rep = linearize(expr, signature)
    return schur_pencil(rep) if args.schur else rep.pencil


def _cmd_fullness(args) -> int:
    pencil = _pencil_from_args(args)
    verdict = test_fullness(pencil, args.N, args.trials, args.seed)
    label = "Full" if verdict.full else "ProbablyNotFull"
    payload = {"verdict": label, "N": verdict.n, "best_scaled_min_sv": verdict.best_scaled_min_sv, "trials": verdict.trials}
    _emit(args, payload, f"{label} (best scaled smallest singular value {verdict.best_scaled_min_sv:.3e})")
    return EXIT_OK if verdict.full else EXIT_NEGATIVE


def _cmd_rank(args) -> int:
    expr, signature = _load_expr(args.expr, args.d1, args.d2)
    estimate = estimate_inner_rank(expr, args.N, args.eps or DEFAULT_EPS_SCHEDULE, args.seed, signature)
    payload = {
        "rank": estimate.rank,
        "p": estimate.p,
        "zero_fraction": estimate.fraction,
        "N": estimate.n_list,
        "extrapolated": estimate.extrapolated,
        "exact_zero_fractions": estimate.exact_zero_fractions,
    }
    _emit(args, payload, f"estimated inner rank {estimate.rank} of {estimate.p} (zero fraction {estimate.fraction:.4f})")
    return EXIT_OK


def _cmd_sa_check(args) -> int:
    expr, signature = _load_expr(args.expr, args.d1, args.d2)
    verdict = is_selfadjoint_multi(expr, args.N, args.trials, args.tol, args.seed, signature)
    label = "Yes" if verdict.selfadjoint else "No"
    payload = {
        "selfadjoint": verdict.selfadjoint,
        "N": verdict.n,
        "evaluated": verdict.evaluated,
        "max_defect": verdict.max_defect,
        "domain_failures": verdict.domain_failures,
    }
    if verdict.witness is not None:
        payload["witness"] = MatrixTupleModel.from_tuple(verdict.witness).model_dump()
    _emit(args, payload, f"{label} (N={verdict.n}, max relative defect {verdict.max_defect:.3e})")
    return EXIT_OK if verdict.selfadjoint else EXIT_NEGATIVE


def _cmd_nondegeneracy(args) -> int:
    expr, signature = _load_expr(args.expr, args.d1, args.d2)
    result = test_nondegeneracy(expr, args.N, args.trials, args.seed, signature)
    payload = {"found": result.found, "N": result.n, "attempts": {str(k): v for k, v in result.attempts.items()}}
    text = f"witness at N={result.n}" if result.found else "NotFound"
    _emit(args, payload, text)
    return EXIT_OK if result.found else EXIT_NEGATIVE


def _cmd_init_db(args) -> int:
    import db

    db.create_tables()
    print(f"Tables created in {db.DATABASE_URL}")
    return EXIT_OK


def _cmd_runs(args) -> int:
    import db

    runs = db.list_runs(args.limit)
    payload = [
        {
            "run_id": r.run_id,
            "status": r.status,
            "expression": r.expression,
            "seed": r.seed,
            "max_n": r.max_n,
            "mean_ks_at_max_n": r.mean_ks_at_max_n,
            "started_at": r.started_at.isoformat() if r.started_at else None,
        }
        for r in runs
    ]
    text = "\n".join(f"{r['run_id']}  {r['status']:<9}  {r['expression']}" for r in payload) or "no runs recorded"
    _emit(args, {"runs": payload}, text)
    return EXIT_OK


def _cmd_library(args) -> int:
    library = ExpressionLibrary(args.dir)
    if args.add:
        name = library.add_expression(args.add)
        logger.info("Added %s to %s", name, library.expressions_dir)
    entries = library.list_expressions()
    text = "\n".join(f"{name:<22} {e['signature']:<10} {e['text']}" for name, e in entries.items())
    _emit(args, {"expressions": list(entries.values())}, text)
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("api:app", host=args.host, port=args.port)
    return EXIT_OK


class _SeedAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace.seed_given = True


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, action=_SeedAction, help="Base seed of every random draw")
    common.add_argument("--tol", type=float, default=1e-8, help="Relative tolerance for verdicts")
    common.add_argument("--out", default=None, help="Output directory")
    common.add_argument("--json", action="store_true", help="Machine-readable output on stdout")
    common.add_argument("--verbose", action="store_true")

    with_expr = argparse.ArgumentParser(add_help=False)
    with_expr.add_argument("--expr", required=True, help="Expression file, library name or inline text")
    with_expr.add_argument("--d1", type=int, default=None)
    with_expr.add_argument("--d2", type=int, default=None)

    parser = argparse.ArgumentParser(prog="ratspec", description="Rational expressions in random matrices")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", parents=[common, with_expr], help="Parse and render an expression")
    p.set_defaults(func=_cmd_parse)

    p = sub.add_parser("linearize", parents=[common, with_expr], help="Formal linear representation")
    p.add_argument("--selfadjoint", action="store_true")
    p.add_argument("--normalize", action="store_true", help="Self-adjoint representation with weight [I; 0]")
    p.add_argument("--schur", action="store_true", help="Bordered pencil of the representation")
    p.add_argument("--no-compact", action="store_true", help="Generic construction for inverted atoms")
    p.set_defaults(func=_cmd_linearize)

    p = sub.add_parser("eval", parents=[common, with_expr], help="Evaluate at a point")
    p.add_argument("--point", help="MatrixTuple JSON file")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--sample-index", type=int, default=0)
    p.add_argument("--inv-tol", type=float, default=1e-10)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sample", parents=[common], help="Draw a random matrix tuple")
    p.add_argument("--d1", type=int, default=None)
    p.add_argument("--d2", type=int, default=None)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--ensemble", help="EnsembleSpec JSON file")
    p.add_argument("--sample-index", type=int, default=0)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("converge", parents=[common], help="Spectral convergence study")
    p.add_argument("--expr", default=None)
    p.add_argument("--config", default=None, help="ExperimentConfig JSON file")
    p.add_argument("--N", type=_int_list, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--eps", type=_float_list, default=None)
    p.add_argument("--reference", default=None)
    p.add_argument("--linearized-max-dim", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--record", action="store_true", help="Record the run in the ledger")
    p.add_argument("--format", choices=("json", "markdown", "html"), default="json")
    p.set_defaults(func=_cmd_converge)

    p = sub.add_parser("fullness", parents=[common], help="Probabilistic fullness test of a pencil")
    p.add_argument("--pencil", help="Pencil or representation JSON file")
    p.add_argument("--expr", help="Use the pencil of this expression's representation")
    p.add_argument("--d1", type=int, default=None)
    p.add_argument("--d2", type=int, default=None)
    p.add_argument("--schur", action="store_true")
    p.add_argument("--N", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=_cmd_fullness)

    p = sub.add_parser("rank", parents=[common, with_expr], help="Inner rank from zero eigenvalues")
    p.add_argument("--N", type=_int_list, default=[50, 100, 200])
    p.add_argument("--eps", type=_float_list, default=None)
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("sa-check", parents=[common, with_expr], help="Randomized self-adjointness check")
    p.add_argument("--N", type=_int_list, default=[2, 4, 8])
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=_cmd_sa_check)

    p = sub.add_parser("nondegeneracy", parents=[common, with_expr], help="Search for a domain witness")
    p.add_argument("--N", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=_cmd_nondegeneracy)

    p = sub.add_parser("init-db", parents=[common], help="Create the run ledger tables")
    p.set_defaults(func=_cmd_init_db)

    p = sub.add_parser("runs", parents=[common], help="List recorded runs")
    p.add_argument("--limit", type=int, default=20)
    p.set_defaults(func=_cmd_runs)

    p = sub.add_parser("library", parents=[common], help="List shipped expressions")
    p.add_argument("--dir", default=None)
    p.add_argument("--add", default=None, help="Copy an expression file into the library")
    p.set_defaults(func=_cmd_library)

    p = sub.add_parser("serve", parents=[common], help="Serve the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5001)
    p.set_defaults(func=_cmd_serve)

    return parser


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns 0 on success, 1 on a negative verdict, 2 on usage errors."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    if not hasattr(args, "seed_given"):
        args.seed_given = False
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    if args.command == "fullness" and not (args.pencil or args.expr):
        logger.error("fullness needs --pencil or --expr")
        return EXIT_USAGE
    try:
        return args.func(args)
    except DomainFailureError as e:
        logger.error("%s", e)
        return EXIT_NEGATIVE
    except ValidationError as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_USAGE
    except (ExprSyntaxError, ExprError, ValueError, FileNotFoundError) as e:
        logger.error("%s", e)
        return EXIT_USAGE


def main() -> None:
    load_dotenv()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    sys.exit(cli())


if __name__ == "__main__":
    main()
