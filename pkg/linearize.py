"""
Formal linear representations of rational expressions.

A representation ``(u, A, v)`` realizes ``R(X) = u·A(X)⁻¹·v`` for an affine
pencil ``A = A₀⊗1 + Σ A_j⊗x_j + Σ B_j⊗u_j``. Representations are built bottom-up
from the expression tree; the self-adjoint variant ``(Q, w)`` realizes
``R = w*·Q⁻¹·w`` with a Hermitian-structured pencil.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from expr_core import (
    Const,
    ExprError,
    Inverse,
    NotSquare,
    Product,
    RationalExpr,
    ScaledVar,
    Signature,
    Sum,
    Var,
    VarKind,
    check_signature,
    infer_signature,
    shape,
)
from spectral import numerical_rank

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


def _frozen(matrix) -> np.ndarray:
    arr = np.array(matrix, dtype=complex)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AffinePencil:
    """``A₀⊗1 + Σ_j A_j⊗x_j + Σ_j B_j⊗u_j`` (plus ``B_j*⊗u_j*`` when ``paired``)."""

    k: int
    a0: np.ndarray
    selfadj_coeffs: Tuple[np.ndarray, ...] = ()
    unitary_coeffs: Tuple[np.ndarray, ...] = ()
    paired: bool = False

    def __post_init__(self):
        object.__setattr__(self, "a0", _frozen(self.a0))
        object.__setattr__(self, "selfadj_coeffs", tuple(_frozen(c) for c in self.selfadj_coeffs))
        object.__setattr__(self, "unitary_coeffs", tuple(_frozen(c) for c in self.unitary_coeffs))
        for name, matrix in self.named_coefficients():
            if matrix.shape != (self.k, self.k):
                raise ExprError(f"Pencil coefficient {name} has shape {matrix.shape}, expected {self.k}x{self.k}")

    @property
    def d1(self) -> int:
        return len(self.selfadj_coeffs)

    @property
    def d2(self) -> int:
        return len(self.unitary_coeffs)

    def named_coefficients(self) -> List[Tuple[str, np.ndarray]]:
        named = [("A0", self.a0)]
        named += [(f"A{j}", c) for j, c in enumerate(self.selfadj_coeffs, start=1)]
        named += [(f"B{j}", c) for j, c in enumerate(self.unitary_coeffs, start=1)]
        return named

    def is_hermitian_structured(self, tol: float = 0.0) -> bool:
        """A₀ and every A_j Hermitian, unitary terms paired with their adjoints."""
        hermitian = [self.a0, *self.selfadj_coeffs]
        if any(np.max(np.abs(m - m.conj().T), initial=0.0) > tol for m in hermitian):
            return False
        return self.paired or not self.unitary_coeffs or not any(b.any() for b in self.unitary_coeffs)

    def map(self, transform) -> "AffinePencil":
        """Apply ``transform`` to every coefficient matrix."""
        return AffinePencil(
            self.k,
            transform(self.a0),
            tuple(transform(c) for c in self.selfadj_coeffs),
            tuple(transform(c) for c in self.unitary_coeffs),
            self.paired,
        )


@dataclass(frozen=True)
class FormalLinRep:
    u: np.ndarray
    pencil: AffinePencil
    v: np.ndarray
    proper: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "u", _frozen(self.u))
        object.__setattr__(self, "v", _frozen(self.v))
        k = self.pencil.k
        if self.u.shape[1] != k or self.v.shape[0] != k:
            raise ExprError(f"u is {self.u.shape} and v is {self.v.shape} for a pencil of dimension {k}")
        object.__setattr__(self, "proper", is_proper(self))

    @property
    def k(self) -> int:
        return self.pencil.k

    @property
    def p(self) -> int:
        return self.u.shape[0]

    @property
    def q(self) -> int:
        return self.v.shape[1]


@dataclass(frozen=True)
class SaLinRep:
    pencil: AffinePencil
    w: np.ndarray
    proper: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "w", _frozen(self.w))
        if self.w.shape[0] != self.pencil.k:
            raise ExprError(f"w is {self.w.shape} for a pencil of dimension {self.pencil.k}")
        if not self.pencil.is_hermitian_structured():
            raise ExprError("Self-adjoint representation needs Hermitian A0, A_j and paired B_j")
        object.__setattr__(self, "proper", is_proper(self))

    @property
    def k(self) -> int:
        return self.pencil.k

    @property
    def p(self) -> int:
        return self.w.shape[1]


Representation = Union[FormalLinRep, SaLinRep]


def is_proper(rep: Representation) -> bool:
    """``k ≥ max(p, q)`` and the outer matrices have full rank (tolerance 1e-10)."""
    if isinstance(rep, SaLinRep):
        p = rep.w.shape[1]
        return rep.pencil.k >= p and numerical_rank(rep.w, RANK_TOL) == p
    p, q = rep.u.shape[0], rep.v.shape[1]
    if rep.pencil.k < max(p, q):
        return False
    return numerical_rank(rep.u, RANK_TOL) == p and numerical_rank(rep.v, RANK_TOL) == q


@dataclass
class _Partial:
    """Representation under construction, coefficients keyed by variable."""

    u: np.ndarray
    a0: np.ndarray
    coeffs: Dict[Var, np.ndarray]
    v: np.ndarray

    @property
    def k(self) -> int:
        return self.a0.shape[0]


def _zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=complex)


def _eye(n: int) -> np.ndarray:
    return np.eye(n, dtype=complex)


def _embed(coeffs: Dict[Var, np.ndarray], k: int, offset: int) -> Dict[Var, np.ndarray]:
    out = {}
    for var, c in coeffs.items():
        big = _zeros(k, k)
        big[offset : offset + c.shape[0], offset : offset + c.shape[1]] = c
        out[var] = big
    return out


def _merge(*parts: Dict[Var, np.ndarray]) -> Dict[Var, np.ndarray]:
    out: Dict[Var, np.ndarray] = {}
    for part in parts:
        for var, c in part.items():
            out[var] = out[var] + c if var in out else c
    return out


def _base(expr: Union[Const, ScaledVar]) -> _Partial:
    p, q = expr.matrix.shape
    k = p + q
    u = np.hstack([_eye(p), _zeros(p, q)])
    v = np.vstack([_zeros(p, q), _eye(q)])
    corner = _zeros(k, k)
    corner[:p, p:] = -expr.matrix
    if isinstance(expr, Const):
        return _Partial(u, _eye(k) + corner, {}, v)
    return _Partial(u, _eye(k), {expr.var: corner}, v)


def _sum(lhs: _Partial, rhs: _Partial) -> _Partial:
    k = lhs.k + rhs.k
    return _Partial(
        np.hstack([lhs.u, rhs.u]),
        scipy.linalg.block_diag(lhs.a0, rhs.a0),
        _merge(_embed(lhs.coeffs, k, 0), _embed(rhs.coeffs, k, lhs.k)),
        np.vstack([lhs.v, rhs.v]),
    )


def _product(lhs: _Partial, rhs: _Partial) -> _Partial:
    k1, k2 = lhs.k, rhs.k
    a0 = scipy.linalg.block_diag(lhs.a0, rhs.a0)
    a0[:k1, k1:] = -lhs.v @ rhs.u
    return _Partial(
        np.hstack([lhs.u, _zeros(lhs.u.shape[0], k2)]),
        a0,
        _merge(_embed(lhs.coeffs, k1 + k2, 0), _embed(rhs.coeffs, k1 + k2, k1)),
        np.vstack([_zeros(k1, rhs.v.shape[1]), rhs.v]),
    )


def _inverse(inner: _Partial) -> _Partial:
    p = inner.u.shape[0]
    k = inner.k + p
    a0 = _zeros(k, k)
    a0[:p, p:] = inner.u
    a0[p:, :p] = inner.v
    a0[p:, p:] = inner.a0
    return _Partial(
        np.hstack([_eye(p), _zeros(p, inner.k)]),
        a0,
        _embed(inner.coeffs, k, p),
        np.vstack([-_eye(p), _zeros(inner.k, p)]),
    )


def _compact_inverse(expr: Inverse) -> Optional[_Partial]:
    # (A⊗x)⁻¹ = I·(A⊗x)⁻¹·I needs only p rows when A itself is invertible
    atom = expr.inner
    if not isinstance(atom, (Const, ScaledVar)):
        return None
    p = atom.matrix.shape[0]
    if numerical_rank(atom.matrix, RANK_TOL) != p:
        return None
    if isinstance(atom, Const):
        return _Partial(_eye(p), np.array(atom.matrix), {}, _eye(p))
    return _Partial(_eye(p), _zeros(p, p), {atom.var: np.array(atom.matrix)}, _eye(p))


def _build(expr: RationalExpr, compact_atoms: bool) -> _Partial:
    if isinstance(expr, (Const, ScaledVar)):
        return _base(expr)
    if isinstance(expr, Sum):
        return _sum(_build(expr.lhs, compact_atoms), _build(expr.rhs, compact_atoms))
    if isinstance(expr, Product):
        return _product(_build(expr.lhs, compact_atoms), _build(expr.rhs, compact_atoms))
    if isinstance(expr, Inverse):
        if compact_atoms:
            compact = _compact_inverse(expr)
            if compact is not None:
                return compact
        return _inverse(_build(expr.inner, compact_atoms))
    raise ExprError(f"Unknown node type {type(expr).__name__}")


def _finish(partial: _Partial, signature: Signature) -> FormalLinRep:
    k = partial.k
    xs = tuple(partial.coeffs.get(var, _zeros(k, k)) for var in signature.variables() if var.kind is VarKind.SELFADJOINT)
    us = tuple(partial.coeffs.get(var, _zeros(k, k)) for var in signature.variables() if var.kind is VarKind.UNITARY)
    return FormalLinRep(partial.u, AffinePencil(k, partial.a0, xs, us), partial.v)


def linearize(
    expr: RationalExpr, signature: Optional[Signature] = None, compact_atoms: bool = True
) -> FormalLinRep:
    """Build a proper formal linear representation of ``expr``.

    With ``compact_atoms`` an inverted constant or scaled variable with an
    invertible coefficient takes ``p`` pencil rows instead of the generic
    bordered construction; the representation stays proper either way.
    """
    shape(expr)
    signature = signature or infer_signature(expr)
    check_signature(expr, signature)
    rep = _finish(_build(expr, compact_atoms), signature)
    logger.debug("Linearized %dx%d expression into a pencil of dimension %d", rep.p, rep.q, rep.k)
    return rep


def _require_square(rep: FormalLinRep) -> None:
    if rep.p != rep.q:
        raise NotSquare(f"Expected a square representation, got {rep.p}x{rep.q}")


def _hermitian_block(c: np.ndarray) -> np.ndarray:
    k = c.shape[0]
    out = _zeros(2 * k, 2 * k)
    out[:k, k:] = c.conj().T
    out[k:, :k] = c
    return out


def _lower_block(c: np.ndarray) -> np.ndarray:
    k = c.shape[0]
    out = _zeros(2 * k, 2 * k)
    out[k:, :k] = c
    return out


def make_selfadjoint_rep(rep: FormalLinRep, signature: Optional[Signature] = None) -> SaLinRep:
    """Self-adjoint representation of dimension ``2k`` for a self-adjoint expression.

    ``Q = [[0, A*], [A, 0]]`` and ``w = [½·u*; v]``. The ``x_j`` and ``x_j*``
    coefficients of ``Q`` are merged by addition into one Hermitian matrix; each
    ``u_j`` coefficient ``B_j`` keeps its partner ``B_j*`` on ``u_j*``.
    """
    _require_square(rep)
    pencil = rep.pencil
    if signature is not None and (pencil.d1, pencil.d2) != (signature.d1, signature.d2):
        pencil = _resize(pencil, signature)
    sa_pencil = AffinePencil(
        2 * pencil.k,
        _hermitian_block(pencil.a0),
        tuple(_hermitian_block(c) for c in pencil.selfadj_coeffs),
        tuple(_lower_block(b) for b in pencil.unitary_coeffs),
        paired=True,
    )
    w = np.vstack([0.5 * rep.u.conj().T, rep.v])
    return SaLinRep(sa_pencil, w)


def _resize(pencil: AffinePencil, signature: Signature) -> AffinePencil:
    if pencil.d1 > signature.d1 or pencil.d2 > signature.d2:
        if any(c.any() for c in pencil.selfadj_coeffs[signature.d1 :] + pencil.unitary_coeffs[signature.d2 :]):
            raise ExprError(f"Pencil uses variables outside signature {signature}")
    zero = _zeros(pencil.k, pencil.k)
    xs = tuple(pencil.selfadj_coeffs[j] if j < pencil.d1 else zero for j in range(signature.d1))
    us = tuple(pencil.unitary_coeffs[j] if j < pencil.d2 else zero for j in range(signature.d2))
    return AffinePencil(pencil.k, pencil.a0, xs, us, pencil.paired)


def schur_pencil(rep: FormalLinRep) -> AffinePencil:
    """Bordered pencil ``[[0_p, u], [v, A]]`` of dimension ``k + p``."""
    _require_square(rep)
    p, k = rep.p, rep.k

    def border(c: np.ndarray) -> np.ndarray:
        out = _zeros(k + p, k + p)
        out[p:, p:] = c
        return out

    a0 = border(rep.pencil.a0)
    a0[:p, p:] = rep.u
    a0[p:, :p] = rep.v
    pencil = rep.pencil
    return AffinePencil(
        k + p,
        a0,
        tuple(border(c) for c in pencil.selfadj_coeffs),
        tuple(border(b) for b in pencil.unitary_coeffs),
        pencil.paired,
    )


def normalize_weight(rep: SaLinRep) -> SaLinRep:
    """Equivalent representation whose weight is ``[I_p; 0]``.

    With ``T = [w, N]`` for an orthonormal basis ``N`` of ``ker w*``, the pencil
    becomes ``T⁻¹·Q·T⁻*``, a congruence that keeps every coefficient Hermitian.
    """
    w = np.asarray(rep.w)
    complement = scipy.linalg.null_space(w.conj().T)
    t = np.hstack([w, complement])
    t_inv = scipy.linalg.inv(t)

    def congruence(c: np.ndarray) -> np.ndarray:
        return t_inv @ c @ t_inv.conj().T

    def hermitian_congruence(c: np.ndarray) -> np.ndarray:
        out = congruence(c)
        return (out + out.conj().T) / 2

    pencil = rep.pencil
    moved = AffinePencil(
        pencil.k,
        hermitian_congruence(pencil.a0),
        tuple(hermitian_congruence(c) for c in pencil.selfadj_coeffs),
        tuple(congruence(b) for b in pencil.unitary_coeffs),
        paired=True,
    )
    weight = np.vstack([_eye(rep.p), _zeros(pencil.k - rep.p, rep.p)])
    return SaLinRep(moved, weight)


def dimension_of(expr: RationalExpr, compact_atoms: bool = False) -> int:
    """Pencil dimension the construction produces, without building the matrices."""
    if isinstance(expr, (Const, ScaledVar)):
        p, q = expr.matrix.shape
        return p + q
    if isinstance(expr, (Sum, Product)):
        return dimension_of(expr.lhs, compact_atoms) + dimension_of(expr.rhs, compact_atoms)
    if isinstance(expr, Inverse):
        p = shape(expr)[0]
        inner = expr.inner
        if compact_atoms and isinstance(inner, (Const, ScaledVar)) and numerical_rank(inner.matrix, RANK_TOL) == p:
            return p
        return dimension_of(inner, compact_atoms) + p
    raise ExprError(f"Unknown node type {type(expr).__name__}")


def pencil_from_coefficients(
    a0, selfadj: Sequence = (), unitary: Sequence = (), paired: bool = False
) -> AffinePencil:
    a0 = np.atleast_2d(np.asarray(a0, dtype=complex))
    return AffinePencil(a0.shape[0], a0, tuple(selfadj), tuple(unitary), paired)
