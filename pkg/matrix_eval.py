"""
Evaluation of expressions and pencils at tuples of complex matrices.

An expression is evaluated recursively with Kronecker semantics: ``A⊗1`` becomes
``A ⊗ I_N`` and ``A⊗x_j`` becomes ``A ⊗ X_j``. An inverse node is in the domain
iff the inner value has relative smallest singular value above ``inv_tol``;
otherwise evaluation stops with a :class:`DomainFailure` result.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from expr_core import (
    Const,
    ExprError,
    Inverse,
    Product,
    RationalExpr,
    ScaledVar,
    SignatureMismatch,
    Sum,
    VarKind,
    shape,
    variables,
)
from linearize import AffinePencil, FormalLinRep, SaLinRep, schur_pencil

logger = logging.getLogger(__name__)

DEFAULT_INV_TOL = 1e-10
HERMITIAN_TOL = 1e-12
UNITARY_TOL = 1e-10


@dataclass(frozen=True)
class MatrixTuple:
    """A point ``(X_1..X_d1, U_1..U_d2)`` of Hermitian and unitary N×N matrices."""

    n: int
    xs: Tuple[np.ndarray, ...] = ()
    us: Tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        if self.n < 1:
            raise ExprError(f"Matrix dimension must be >= 1, got {self.n}")
        xs = tuple(self._checked(x, f"X{j}") for j, x in enumerate(self.xs, start=1))
        us = tuple(self._checked(u, f"U{j}") for j, u in enumerate(self.us, start=1))
        for j, x in enumerate(xs, start=1):
            scale = np.linalg.norm(x)
            if np.linalg.norm(x - x.conj().T) > HERMITIAN_TOL * scale:
                raise ExprError(f"X{j} is not Hermitian")
        eye = np.eye(self.n)
        for j, u in enumerate(us, start=1):
            if np.linalg.norm(u @ u.conj().T - eye, ord=2) > UNITARY_TOL:
                raise ExprError(f"U{j} is not unitary")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "us", us)

    def _checked(self, matrix, name: str) -> np.ndarray:
        arr = np.array(matrix, dtype=complex)
        if arr.shape != (self.n, self.n):
            raise ExprError(f"{name} has shape {arr.shape}, expected {self.n}x{self.n}")
        arr.setflags(write=False)
        return arr

    @classmethod
    def of(cls, xs: Sequence = (), us: Sequence = ()) -> "MatrixTuple":
        """Build a tuple inferring N from the first matrix."""
        first = next(iter(list(xs) + list(us)), None)
        if first is None:
            raise ExprError("Cannot infer N from an empty tuple")
        return cls(np.asarray(first).shape[0], tuple(xs), tuple(us))

    @property
    def d1(self) -> int:
        return len(self.xs)

    @property
    def d2(self) -> int:
        return len(self.us)


@dataclass(frozen=True)
class DomainFailure:
    path: Tuple[str, ...]
    subexpression: RationalExpr
    smallest_singular_value: float
    relative_singular_value: float

    def describe(self) -> str:
        location = "/".join(self.path) or "<root>"
        return (
            f"inverse at {location} is not invertible "
            f"(smallest singular value {self.smallest_singular_value:.3e}, "
            f"relative {self.relative_singular_value:.3e})"
        )


class DomainFailureError(ExprError):
    def __init__(self, failure: DomainFailure):
        self.failure = failure
        super().__init__(f"Point is outside the domain: {failure.describe()}")


@dataclass(frozen=True)
class EvalOutcome:
    value: Optional[np.ndarray] = None
    failure: Optional[DomainFailure] = None

    @property
    def ok(self) -> bool:
        return self.failure is None

    def unwrap(self) -> np.ndarray:
        if self.failure is not None:
            raise DomainFailureError(self.failure)
        return self.value


class _OutOfDomain(Exception):
    def __init__(self, failure: DomainFailure):
        self.failure = failure


def check_point(expr: RationalExpr, point: MatrixTuple) -> None:
    for var in variables(expr):
        available = point.d1 if var.kind is VarKind.SELFADJOINT else point.d2
        if var.index > available:
            raise SignatureMismatch(f"Variable {var.name} has no matrix in a point with d1={point.d1} d2={point.d2}")


def relative_min_singular_value(matrix: np.ndarray) -> Tuple[float, float]:
    s = scipy.linalg.svdvals(matrix, check_finite=False)
    smallest = float(s[-1])
    largest = float(s[0])
    return smallest, (smallest / largest if largest > 0 else 0.0)


def _eval(expr: RationalExpr, point: MatrixTuple, inv_tol: float, path: Tuple[str, ...]) -> np.ndarray:
    if isinstance(expr, Const):
        return np.kron(expr.matrix, np.eye(point.n))
    if isinstance(expr, ScaledVar):
        source = point.xs if expr.var.kind is VarKind.SELFADJOINT else point.us
        return np.kron(expr.matrix, source[expr.var.index - 1])
    if isinstance(expr, Sum):
        return _eval(expr.lhs, point, inv_tol, path + ("lhs",)) + _eval(expr.rhs, point, inv_tol, path + ("rhs",))
    if isinstance(expr, Product):
        return _eval(expr.lhs, point, inv_tol, path + ("lhs",)) @ _eval(expr.rhs, point, inv_tol, path + ("rhs",))
    if isinstance(expr, Inverse):
        inner = _eval(expr.inner, point, inv_tol, path + ("inner",))
        smallest, relative = relative_min_singular_value(inner)
        if relative <= inv_tol:
            raise _OutOfDomain(DomainFailure(path, expr, smallest, relative))
        lu = scipy.linalg.lu_factor(inner, check_finite=False)
        return scipy.linalg.lu_solve(lu, np.eye(inner.shape[0], dtype=complex), check_finite=False)
    raise ExprError(f"Unknown node type {type(expr).__name__}")


def eval_expr(expr: RationalExpr, point: MatrixTuple, inv_tol: float = DEFAULT_INV_TOL) -> EvalOutcome:
    """Evaluate ``expr`` at ``point``; a failing inverse is returned, not raised.

    Raises:
        ShapeMismatch: if the expression is malformed
        SignatureMismatch: if the point lacks a matrix for a variable of ``expr``
    """
    shape(expr)
    check_point(expr, point)
    try:
        return EvalOutcome(value=_eval(expr, point, inv_tol, ()))
    except _OutOfDomain as exc:
        logger.debug("Domain failure: %s", exc.failure.describe())
        return EvalOutcome(failure=exc.failure)


def _check_pencil_point(pencil: AffinePencil, d1: int, d2: int) -> None:
    if pencil.d1 > d1 or pencil.d2 > d2:
        raise SignatureMismatch(
            f"Pencil needs d1={pencil.d1} d2={pencil.d2}, point has d1={d1} d2={d2}"
        )


def eval_pencil_at(pencil: AffinePencil, xs: Sequence[np.ndarray], us: Sequence[np.ndarray], n: Optional[int] = None) -> np.ndarray:
    """Evaluate at arbitrary complex matrices; paired unitary terms use the conjugate transpose."""
    _check_pencil_point(pencil, len(xs), len(us))
    if n is None:
        first = next(iter(list(xs) + list(us)), None)
        n = 1 if first is None else np.asarray(first).shape[0]
    result = np.kron(pencil.a0, np.eye(n))
    for c, x in zip(pencil.selfadj_coeffs, xs):
        if c.any():
            result = result + np.kron(c, x)
    for b, u in zip(pencil.unitary_coeffs, us):
        if b.any():
            result = result + np.kron(b, u)
            if pencil.paired:
                result = result + np.kron(b.conj().T, np.asarray(u).conj().T)
    return result


def eval_pencil(pencil: AffinePencil, point: MatrixTuple) -> np.ndarray:
    """``A₀⊗I_N + Σ A_j⊗X_j + Σ (B_j⊗U_j [+ B_j*⊗U_j*])`` as a kN×kN matrix."""
    return eval_pencil_at(pencil, point.xs, point.us, point.n)


@dataclass(frozen=True)
class PencilDeterminant:
    """Determinant as ``phase · exp(log_modulus)``; ``phase`` is 0 for a singular matrix."""

    phase: complex
    log_modulus: float

    @property
    def value(self) -> complex:
        if self.phase == 0:
            return 0j
        return complex(self.phase * np.exp(self.log_modulus))

    @property
    def vanishes(self) -> bool:
        return self.phase == 0 or np.isneginf(self.log_modulus)


def pencil_det(pencil: AffinePencil, point: MatrixTuple) -> PencilDeterminant:
    phase, log_modulus = np.linalg.slogdet(eval_pencil(pencil, point))
    return PencilDeterminant(complex(phase), float(log_modulus))


def scaled_min_singular_value(matrix: np.ndarray) -> float:
    """Smallest over largest singular value after normalizing every row to unit length.

    A zero row gives 0.
    """
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0):
        return 0.0
    _, relative = relative_min_singular_value(matrix / norms[:, None])
    return relative


def representation_value(rep: Union[FormalLinRep, SaLinRep], point: MatrixTuple) -> np.ndarray:
    """``u·A(X)⁻¹·v`` resp. ``w*·Q(X)⁻¹·w`` at ``point``."""
    pencil_value = eval_pencil(rep.pencil, point)
    eye = np.eye(point.n)
    if isinstance(rep, SaLinRep):
        w = np.kron(rep.w, eye)
        return w.conj().T @ scipy.linalg.solve(pencil_value, w, check_finite=False)
    u = np.kron(rep.u, eye)
    v = np.kron(rep.v, eye)
    return u @ scipy.linalg.solve(pencil_value, v, check_finite=False)


@dataclass
class RepresentationReport:
    ok: bool
    residual: float
    pencil_invertible: bool
    pencil_scaled_min_sv: float


def verify_representation(
    rep: Union[FormalLinRep, SaLinRep],
    expr: RationalExpr,
    point: MatrixTuple,
    tol: float = 1e-8,
    inv_tol: float = DEFAULT_INV_TOL,
) -> RepresentationReport:
    """Compare the direct value of ``expr`` with the representation at ``point``.

    Raises:
        DomainFailureError: if ``point`` is outside the domain of ``expr``
    """
    direct = eval_expr(expr, point, inv_tol).unwrap()
    pencil_value = eval_pencil(rep.pencil, point)
    _, relative = relative_min_singular_value(pencil_value)
    if relative <= inv_tol:
        logger.warning("Pencil is singular at a point of the domain (relative sv %.3e)", relative)
        return RepresentationReport(False, float("inf"), False, relative)
    value = representation_value(rep, point)
    if value.shape != direct.shape:
        return RepresentationReport(False, float("inf"), True, relative)
    residual = float(np.linalg.norm(direct - value) / (1.0 + np.linalg.norm(direct)))
    return RepresentationReport(residual <= tol, residual, True, relative)


def schur_inverse(rep: FormalLinRep, point: MatrixTuple) -> np.ndarray:
    """``R(X)⁻¹ = (I_p 0)·Ã(X)⁻¹·(−I_p; 0)`` from the bordered pencil."""
    bordered = eval_pencil(schur_pencil(rep), point)
    pn = rep.p * point.n
    rhs = np.zeros((bordered.shape[0], pn), dtype=complex)
    rhs[:pn, :] = -np.eye(pn)
    return scipy.linalg.solve(bordered, rhs, check_finite=False)[:pn, :]


def vanishes_identically(
    pencil: AffinePencil,
    points: Optional[Sequence[Tuple[Sequence[np.ndarray], Sequence[np.ndarray]]]] = None,
    tol: float = 1e-10,
    n: int = 3,
    trials: int = 5,
    seed: int = 0,
) -> bool:
    """True when the pencil is numerically singular at every given ``(xs, us)`` point.

    Without ``points``, ``trials`` Ginibre points of size ``n`` are drawn.
    """
    if points is None:
        from randmat import rng_stream, sample_general_point

        rng = rng_stream(seed, n)
        points = [sample_general_point(pencil.d1, pencil.d2, n, rng) for _ in range(trials)]
    return all(scaled_min_singular_value(eval_pencil_at(pencil, xs, us)) < tol for xs, us in points)
