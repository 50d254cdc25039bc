"""
Typed AST for matrix-valued noncommutative rational expressions.

Expressions are built from constant coefficients ``A ⊗ 1``, scaled variables
``A ⊗ x_j`` / ``A ⊗ u_j``, binary sums, binary products and inverses. They are
formal objects: no arithmetic identification is ever applied, two expressions
are equal only when their trees are equal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

Shape = Tuple[int, int]
Path = Tuple[str, ...]


class ExprError(ValueError):
    """Base class for errors raised while building or checking expressions."""


class ShapeMismatch(ExprError):
    def __init__(self, message: str, path: Sequence[str] = ()):
        self.reason = message
        self.path = tuple(path)
        location = "/".join(self.path) or "<root>"
        super().__init__(f"{message} (at {location})")


class UnknownVariable(ExprError):
    pass


class SignatureMismatch(ExprError):
    pass


class NotSquare(ExprError):
    pass


class NoSampleInDomain(ExprError):
    pass


class VarKind(str, Enum):
    SELFADJOINT = "x"
    UNITARY = "u"


@dataclass(frozen=True, order=True)
class Var:
    kind: VarKind
    index: int

    def __post_init__(self):
        if self.index < 1:
            raise ExprError(f"Variable index must be >= 1, got {self.index}")

    @property
    def name(self) -> str:
        return f"{self.kind.value}{self.index}"

    @classmethod
    def from_name(cls, name: str) -> "Var":
        if len(name) < 2 or name[0] not in ("x", "u") or not name[1:].isdigit():
            raise ExprError(f"Not a variable name: {name!r}")
        return cls(VarKind(name[0]), int(name[1:]))

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Signature:
    """Counts of self-adjoint (``x``) and unitary (``u``) variables."""

    d1: int
    d2: int

    def __post_init__(self):
        if self.d1 < 0 or self.d2 < 0:
            raise ExprError(f"Signature counts must be non-negative: d1={self.d1}, d2={self.d2}")
        if self.d1 + self.d2 < 1:
            raise ExprError("Signature needs at least one variable (d1 + d2 >= 1)")

    def variables(self) -> List[Var]:
        xs = [Var(VarKind.SELFADJOINT, j) for j in range(1, self.d1 + 1)]
        us = [Var(VarKind.UNITARY, j) for j in range(1, self.d2 + 1)]
        return xs + us

    def contains(self, var: Var) -> bool:
        bound = self.d1 if var.kind is VarKind.SELFADJOINT else self.d2
        return var.index <= bound

    def check(self, var: Var) -> None:
        if not self.contains(var):
            raise UnknownVariable(f"Variable {var.name} is outside signature d1={self.d1} d2={self.d2}")

    def __str__(self) -> str:
        return f"d1={self.d1} d2={self.d2}"


def as_matrix(value: Any) -> np.ndarray:
    """Coerce a scalar or nested sequence to a read-only complex 2-d array."""
    arr = np.array(value, dtype=complex)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ExprError(f"Coefficient must be a matrix, got array of ndim {arr.ndim}")
    if 0 in arr.shape:
        raise ExprError("Coefficient matrices must be non-empty")
    arr.setflags(write=False)
    return arr


def _matrix_key(arr: np.ndarray) -> tuple:
    return (arr.shape, tuple(arr.ravel().tolist()))


class RationalExpr:
    """Base class of the expression tree. Nodes are immutable."""

    __slots__ = ("_shape",)

    def children(self) -> Tuple["RationalExpr", ...]:
        return ()

    def key(self) -> tuple:
        raise NotImplementedError

    @property
    def shape(self) -> Shape:
        return shape(self)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RationalExpr):
            return NotImplemented
        return self is other or self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    def __setattr__(self, name, value):
        if name == "_shape" and not hasattr(self, "_shape"):
            object.__setattr__(self, name, value)
            return
        raise AttributeError(f"{type(self).__name__} is immutable")

    # builders; operands are validated eagerly so errors surface where they are made

    def __add__(self, other: Any) -> "RationalExpr":
        result = Sum(self, _coerce(other, self))
        shape(result)
        return result

    def __radd__(self, other: Any) -> "RationalExpr":
        result = Sum(_coerce(other, self), self)
        shape(result)
        return result

    def __sub__(self, other: Any) -> "RationalExpr":
        return self + negate(_coerce(other, self))

    def __rsub__(self, other: Any) -> "RationalExpr":
        return _coerce(other, self) + negate(self)

    def __neg__(self) -> "RationalExpr":
        return negate(self)

    def __mul__(self, other: Any) -> "RationalExpr":
        if _is_scalar(other):
            other = Const(complex(other) * np.eye(shape(self)[1]))
        elif not isinstance(other, RationalExpr):
            other = Const(other)
        result = Product(self, other)
        shape(result)
        return result

    def __rmul__(self, other: Any) -> "RationalExpr":
        if not _is_scalar(other):
            return NotImplemented
        result = Product(Const(complex(other) * np.eye(shape(self)[0])), self)
        shape(result)
        return result

    def inv(self) -> "RationalExpr":
        result = Inverse(self)
        shape(result)
        return result

    def adjoint(self) -> "RationalExpr":
        return formal_adjoint(self)

    def __repr__(self) -> str:
        from expr_parser import render

        return f"{type(self).__name__}<{render(self)}>"


class Const(RationalExpr):
    __slots__ = ("matrix",)

    def __init__(self, matrix: Any):
        object.__setattr__(self, "matrix", as_matrix(matrix))

    def key(self) -> tuple:
        return ("const", _matrix_key(self.matrix))


class ScaledVar(RationalExpr):
    __slots__ = ("matrix", "var")

    def __init__(self, matrix: Any, var: Union[Var, str]):
        if isinstance(var, str):
            var = Var.from_name(var)
        object.__setattr__(self, "matrix", as_matrix(matrix))
        object.__setattr__(self, "var", var)

    def key(self) -> tuple:
        return ("var", self.var.kind.value, self.var.index, _matrix_key(self.matrix))


class Sum(RationalExpr):
    __slots__ = ("lhs", "rhs")

    def __init__(self, lhs: RationalExpr, rhs: RationalExpr):
        object.__setattr__(self, "lhs", lhs)
        object.__setattr__(self, "rhs", rhs)

    def children(self):
        return (self.lhs, self.rhs)

    def key(self) -> tuple:
        return ("sum", self.lhs.key(), self.rhs.key())


class Product(RationalExpr):
    __slots__ = ("lhs", "rhs")

    def __init__(self, lhs: RationalExpr, rhs: RationalExpr):
        object.__setattr__(self, "lhs", lhs)
        object.__setattr__(self, "rhs", rhs)

    def children(self):
        return (self.lhs, self.rhs)

    def key(self) -> tuple:
        return ("product", self.lhs.key(), self.rhs.key())


class Inverse(RationalExpr):
    __slots__ = ("inner",)

    def __init__(self, inner: RationalExpr):
        object.__setattr__(self, "inner", inner)

    def children(self):
        return (self.inner,)

    def key(self) -> tuple:
        return ("inverse", self.inner.key())


def _is_scalar(value: Any) -> bool:
    return isinstance(value, (int, float, complex, np.number))


def _coerce(value: Any, like: RationalExpr) -> RationalExpr:
    if isinstance(value, RationalExpr):
        return value
    if _is_scalar(value):
        rows, cols = shape(like)
        if rows != cols:
            raise ShapeMismatch(f"Cannot add a scalar to a {rows}x{cols} expression")
        return Const(complex(value) * np.eye(rows))
    return Const(value)


def x(index: int, coefficient: Any = 1.0) -> ScaledVar:
    return ScaledVar(coefficient, Var(VarKind.SELFADJOINT, index))


def u(index: int, coefficient: Any = 1.0) -> ScaledVar:
    return ScaledVar(coefficient, Var(VarKind.UNITARY, index))


def const(matrix: Any) -> Const:
    return Const(matrix)


def negate(expr: RationalExpr) -> RationalExpr:
    """``-e`` as ``(-I)·e`` with the ``-I`` attached to the leftmost factor of a product chain."""
    if isinstance(expr, Product):
        return Product(negate(expr.lhs), expr.rhs)
    rows = shape(expr)[0]
    return Product(Const(-np.eye(rows)), expr)


def shape(expr: RationalExpr) -> Shape:
    """Return the (rows, cols) shape of ``expr``, caching it on every node.

    Raises:
        ShapeMismatch: with the path into the tree of the offending node
    """
    return _shape(expr, ())


def _shape(expr: RationalExpr, path: Path) -> Shape:
    cached = getattr(expr, "_shape", None)
    if cached is not None:
        return cached
    if isinstance(expr, (Const, ScaledVar)):
        result = expr.matrix.shape
    elif isinstance(expr, Sum):
        lhs = _shape(expr.lhs, path + ("lhs",))
        rhs = _shape(expr.rhs, path + ("rhs",))
        if lhs != rhs:
            raise ShapeMismatch(f"Sum of {lhs[0]}x{lhs[1]} and {rhs[0]}x{rhs[1]}", path)
        result = lhs
    elif isinstance(expr, Product):
        lhs = _shape(expr.lhs, path + ("lhs",))
        rhs = _shape(expr.rhs, path + ("rhs",))
        if lhs[1] != rhs[0]:
            raise ShapeMismatch(f"Product of {lhs[0]}x{lhs[1]} and {rhs[0]}x{rhs[1]}", path)
        result = (lhs[0], rhs[1])
    elif isinstance(expr, Inverse):
        inner = _shape(expr.inner, path + ("inner",))
        if inner[0] != inner[1]:
            raise ShapeMismatch(f"Inverse of non-square {inner[0]}x{inner[1]}", path)
        result = inner
    else:
        raise ExprError(f"Unknown node type {type(expr).__name__}")
    result = (int(result[0]), int(result[1]))
    expr._shape = result
    return result


def variables(expr: RationalExpr) -> List[Var]:
    found = set()
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, ScaledVar):
            found.add(node.var)
        stack.extend(node.children())
    return sorted(found)


def depth(expr: RationalExpr) -> int:
    children = expr.children()
    return 1 + (max(depth(c) for c in children) if children else 0)


def size(expr: RationalExpr) -> int:
    return 1 + sum(size(c) for c in expr.children())


def infer_signature(expr: RationalExpr) -> Signature:
    """Smallest signature containing every variable of ``expr`` (at least one ``x``)."""
    d1 = d2 = 0
    for var in variables(expr):
        if var.kind is VarKind.SELFADJOINT:
            d1 = max(d1, var.index)
        else:
            d2 = max(d2, var.index)
    if d1 + d2 == 0:
        d1 = 1
    return Signature(d1, d2)


def check_signature(expr: RationalExpr, signature: Signature) -> None:
    for var in variables(expr):
        signature.check(var)


def is_square(expr: RationalExpr) -> bool:
    rows, cols = shape(expr)
    return rows == cols


def formal_adjoint(expr: RationalExpr) -> RationalExpr:
    """Syntactic adjoint under ``x_j* = x_j`` and ``u_j* = u_j⁻¹``."""
    if isinstance(expr, Const):
        return Const(expr.matrix.conj().T)
    if isinstance(expr, ScaledVar):
        coeff = expr.matrix.conj().T
        if expr.var.kind is VarKind.SELFADJOINT:
            return ScaledVar(coeff, expr.var)
        return _unitary_adjoint(coeff, expr.var)
    if isinstance(expr, Sum):
        return Sum(formal_adjoint(expr.lhs), formal_adjoint(expr.rhs))
    if isinstance(expr, Product):
        return Product(formal_adjoint(expr.rhs), formal_adjoint(expr.lhs))
    if isinstance(expr, Inverse):
        return Inverse(formal_adjoint(expr.inner))
    raise ExprError(f"Unknown node type {type(expr).__name__}")


def _unitary_adjoint(coeff: np.ndarray, var: Var) -> RationalExpr:
    # (A ⊗ u)* = A* ⊗ u⁻¹, written with an identity-coefficient inverse on the smaller side
    rows, cols = coeff.shape
    if rows == cols and np.array_equal(coeff, np.eye(rows)):
        return Inverse(ScaledVar(coeff, var))
    if cols <= rows:
        return Product(Const(coeff), Inverse(ScaledVar(np.eye(cols), var)))
    return Product(Inverse(ScaledVar(np.eye(rows), var)), Const(coeff))


def flatten(expr: RationalExpr) -> Any:
    """Display tree with sums and products flattened; never used for identity."""
    if isinstance(expr, Sum):
        return ("sum", [flatten(t) for t in _operands(expr, Sum)])
    if isinstance(expr, Product):
        return ("product", [flatten(f) for f in _operands(expr, Product)])
    if isinstance(expr, Inverse):
        return ("inverse", flatten(expr.inner))
    if isinstance(expr, ScaledVar):
        return ("var", expr.var.name, shape(expr))
    return ("const", shape(expr))


def _operands(expr: RationalExpr, kind: type) -> List[RationalExpr]:
    if isinstance(expr, kind):
        return _operands(expr.lhs, kind) + _operands(expr.rhs, kind)
    return [expr]


@dataclass(frozen=True)
class ExprMatrix:
    """A p×q grid of scalar-valued expressions sharing one signature."""

    entries: Tuple[Tuple[RationalExpr, ...], ...]
    signature: Optional[Signature] = None

    def __post_init__(self):
        rows = tuple(tuple(row) for row in self.entries)
        if not rows or not rows[0]:
            raise ShapeMismatch("Expression matrix must be non-empty")
        width = len(rows[0])
        for i, row in enumerate(rows):
            if len(row) != width:
                raise ShapeMismatch(f"Row {i} has {len(row)} entries, expected {width}")
            for j, entry in enumerate(row):
                if shape(entry) != (1, 1):
                    raise ShapeMismatch(f"Entry ({i},{j}) is not scalar-valued", (f"[{i}][{j}]",))
                if self.signature is not None:
                    check_signature(entry, self.signature)
        object.__setattr__(self, "entries", rows)

    @property
    def shape(self) -> Shape:
        return (len(self.entries), len(self.entries[0]))


def lift_matrix(entries: Union[ExprMatrix, Sequence[Sequence[RationalExpr]]]) -> RationalExpr:
    """Lift a grid of scalar expressions to one p×q expression ``Σ (e_i⊗1) r_ij (e_jᵀ⊗1)``."""
    grid = entries if isinstance(entries, ExprMatrix) else ExprMatrix(entries)
    p, q = grid.shape
    if (p, q) == (1, 1):
        return grid.entries[0][0]

    flat = [grid.entries[i][j] for i in range(p) for j in range(q)]
    if all(isinstance(e, Const) for e in flat):
        block = np.array([[grid.entries[i][j].matrix[0, 0] for j in range(q)] for i in range(p)])
        return Const(block)

    terms: List[RationalExpr] = []
    for i in range(p):
        for j in range(q):
            entry = grid.entries[i][j]
            if isinstance(entry, Const) and not entry.matrix.any():
                continue
            unit = np.zeros((p, q), dtype=complex)
            unit[i, j] = 1.0
            if isinstance(entry, Const):
                terms.append(Const(unit * entry.matrix[0, 0]))
            elif isinstance(entry, ScaledVar):
                terms.append(ScaledVar(unit * entry.matrix[0, 0], entry.var))
            else:
                left = np.zeros((p, 1), dtype=complex)
                left[i, 0] = 1.0
                right = np.zeros((1, q), dtype=complex)
                right[0, j] = 1.0
                terms.append(Product(Product(Const(left), entry), Const(right)))

    result = terms[0]
    for term in terms[1:]:
        result = Sum(result, term)
    shape(result)
    return result


@dataclass
class SelfAdjointVerdict:
    """Outcome of the randomized self-adjointness check.

    ``selfadjoint=False`` is certain (a witness point is attached); ``True`` only
    means no counterexample was found among the evaluated samples.
    """

    selfadjoint: bool
    n: int
    evaluated: int
    trials: int
    max_defect: float
    witness: Optional[Any] = None
    domain_failures: int = 0
    details: Dict[str, Any] = field(default_factory=dict)


def is_selfadjoint_probabilistic(
    expr: RationalExpr,
    n: int,
    trials: int = 20,
    tol: float = 1e-8,
    seed: int = 0,
    signature: Optional[Signature] = None,
    inv_tol: float = 1e-10,
) -> SelfAdjointVerdict:
    """Evaluate ``expr`` at random Hermitian/unitary points and compare with its adjoint.

    Raises:
        NotSquare: if ``expr`` is not square
        NoSampleInDomain: if no trial point lies in the domain of ``expr``
    """
    from matrix_eval import eval_expr
    from randmat import EnsembleSpec, sample_tuple

    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if not is_square(expr):
        rows, cols = shape(expr)
        raise NotSquare(f"Self-adjointness needs a square expression, got {rows}x{cols}")
    if n < 2:
        raise ExprError(f"Self-adjointness check needs N >= 2, got {n}")
    signature = signature or infer_signature(expr)
    check_signature(expr, signature)

    spec = EnsembleSpec(d1=signature.d1, d2=signature.d2, n=n, seed=seed)
    evaluated = failures = 0
    max_defect = 0.0
    for trial in range(trials):
        point = sample_tuple(spec, sample_index=trial)
        outcome = eval_expr(expr, point, inv_tol=inv_tol)
        if not outcome.ok:
            failures += 1
            continue
        evaluated += 1
        value = outcome.value
        scale = np.linalg.norm(value)
        defect = np.linalg.norm(value - value.conj().T)
        relative = defect / scale if scale > 0 else defect
        max_defect = max(max_defect, float(relative))
        if defect > tol * scale:
            logger.debug("Self-adjointness fails at trial %d (relative defect %.3e)", trial, relative)
            return SelfAdjointVerdict(False, n, evaluated, trials, max_defect, point, failures)

    if evaluated == 0:
        raise NoSampleInDomain(f"None of {trials} samples at N={n} lies in the domain")
    return SelfAdjointVerdict(True, n, evaluated, trials, max_defect, None, failures)


def is_selfadjoint_multi(
    expr: RationalExpr,
    n_list: Sequence[int] = (2, 4, 8),
    trials: int = 20,
    tol: float = 1e-8,
    seed: int = 0,
    signature: Optional[Signature] = None,
    inv_tol: float = 1e-10,
) -> SelfAdjointVerdict:
    """Run the randomized check at several dimensions; the first No wins."""
    last: Optional[SelfAdjointVerdict] = None
    for n in n_list:
        try:
            verdict = is_selfadjoint_probabilistic(expr, n, trials, tol, seed, signature, inv_tol)
        except NoSampleInDomain:
            logger.info("No sample in the domain at N=%d, trying the next dimension", n)
            continue
        if not verdict.selfadjoint:
            return verdict
        last = verdict
    if last is None:
        raise NoSampleInDomain(f"No sample in the domain at any N in {list(n_list)}")
    return last
