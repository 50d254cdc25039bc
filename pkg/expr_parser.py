"""
Text grammar for rational expressions (see GRAMMAR.md).

    expr    := ['-'] term (('+' | '-') term)*
    term    := factor ('*' factor)*
    factor  := '-' factor | postfix
    postfix := atom ('^' '-' '1')*
    atom    := NUMBER | IMAG | VAR | 'inv' '(' expr ')'
             | 'kron' '(' matrix ',' VAR ')' | matrix | '(' expr ')'
    matrix  := '[' row (',' row)* ']'
    row     := '[' expr (',' expr)* ']'

Subtraction and negation are resolved at parse time into ``(-I)·`` factors so the
resulting tree only uses the constructors of the AST.
"""

import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from expr_core import (
    Const,
    ExprError,
    ExprMatrix,
    Inverse,
    Product,
    RationalExpr,
    ScaledVar,
    ShapeMismatch,
    Signature,
    Sum,
    Var,
    check_signature,
    lift_matrix,
    negate,
    shape,
    variables,
)


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at position {position}")


@dataclass(frozen=True)
class ExprSource:
    text: str
    signature: Optional[Signature] = None


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)(?P<imag>i(?![A-Za-z0-9_]))?
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<symbol>[-+*^()\[\],])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    position: int


def tokenize(text: str) -> List[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise ExprSyntaxError(f"Unexpected character {text[pos]!r}", pos)
        if m.group("number") is not None:
            kind = "imag" if m.group("imag") else "number"
            tokens.append(_Token(kind, m.group("number"), pos))
        elif m.group("name") is not None:
            tokens.append(_Token("name", m.group("name"), pos))
        elif m.group("symbol") is not None:
            tokens.append(_Token(m.group("symbol"), m.group("symbol"), pos))
        pos = m.end()
    tokens.append(_Token("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, signature: Optional[Signature]):
        self.tokens = tokenize(text)
        self.index = 0
        self.signature = signature

    @property
    def current(self) -> _Token:
        return self.tokens[self.index]

    def advance(self) -> _Token:
        token = self.current
        self.index += 1
        return token

    def expect(self, kind: str) -> _Token:
        if self.current.kind != kind:
            found = self.current.text or "end of input"
            raise ExprSyntaxError(f"Expected {kind!r}, found {found!r}", self.current.position)
        return self.advance()

    def parse(self) -> RationalExpr:
        expr = self.expr()
        if self.current.kind != "eof":
            raise ExprSyntaxError(f"Unexpected {self.current.text!r}", self.current.position)
        return expr

    def expr(self) -> RationalExpr:
        negative = False
        if self.current.kind == "-":
            self.advance()
            negative = True
        result = self._signed(self.term(), negative)
        while self.current.kind in ("+", "-"):
            op = self.advance()
            rhs = self._signed(self.term(), op.kind == "-")
            result = Sum(result, rhs)
            self._shape(result, op.position)
        return result

    def _signed(self, term: RationalExpr, negative: bool) -> RationalExpr:
        return negate(term) if negative else term

    def term(self) -> RationalExpr:
        result = self.factor()
        while self.current.kind == "*":
            op = self.advance()
            result = Product(result, self.factor())
            self._shape(result, op.position)
        return result

    def factor(self) -> RationalExpr:
        if self.current.kind == "-":
            self.advance()
            return negate(self.factor())
        return self.postfix()

    def postfix(self) -> RationalExpr:
        result = self.atom()
        while self.current.kind == "^":
            op = self.advance()
            self.expect("-")
            one = self.expect("number")
            if float(one.text) != 1.0:
                raise ExprSyntaxError("Only the exponent -1 is supported", one.position)
            result = Inverse(result)
            self._shape(result, op.position)
        return result

    def atom(self) -> RationalExpr:
        token = self.current
        if token.kind == "number":
            self.advance()
            return Const(float(token.text))
        if token.kind == "imag":
            self.advance()
            return Const(1j * float(token.text))
        if token.kind == "[":
            return self.matrix()
        if token.kind == "(":
            self.advance()
            inner = self.expr()
            self.expect(")")
            return inner
        if token.kind == "name":
            return self.named()
        found = token.text or "end of input"
        raise ExprSyntaxError(f"Unexpected {found!r}", token.position)

    def named(self) -> RationalExpr:
        token = self.advance()
        name = token.text
        if name == "i":
            return Const(1j)
        if name == "inv":
            self.expect("(")
            inner = self.expr()
            self.expect(")")
            result = Inverse(inner)
            self._shape(result, token.position)
            return result
        if name == "kron":
            self.expect("(")
            coeff = self.matrix()
            if not isinstance(coeff, Const):
                raise ExprSyntaxError("kron() needs a constant matrix", token.position)
            self.expect(",")
            var = self.variable(self.expect("name"))
            self.expect(")")
            return ScaledVar(coeff.matrix, var)
        return ScaledVar(1.0, self.variable(token))

    def variable(self, token: _Token) -> Var:
        try:
            var = Var.from_name(token.text)
        except ExprError:
            raise ExprSyntaxError(f"Unknown name {token.text!r}", token.position) from None
        if self.signature is not None:
            self.signature.check(var)
        return var

    def matrix(self) -> RationalExpr:
        start = self.expect("[")
        rows = [self.row()]
        while self.current.kind == ",":
            self.advance()
            rows.append(self.row())
        self.expect("]")
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise ExprSyntaxError("Matrix rows have different lengths", start.position)
        for r in rows:
            for entry in r:
                if shape(entry) != (1, 1):
                    raise ExprSyntaxError("Matrix entries must be scalar-valued", start.position)
        if all(not variables(entry) for r in rows for entry in r):
            return Const([[_constant_value(entry) for entry in r] for r in rows])
        return lift_matrix(ExprMatrix(tuple(tuple(r) for r in rows), self.signature))

    def row(self) -> List[RationalExpr]:
        self.expect("[")
        entries = [self.expr()]
        while self.current.kind == ",":
            self.advance()
            entries.append(self.expr())
        self.expect("]")
        return entries

    def _shape(self, expr: RationalExpr, position: int) -> None:
        try:
            shape(expr)
        except ShapeMismatch as exc:
            raise ShapeMismatch(f"{exc.reason} near position {position}", exc.path) from None


def _constant_value(expr: RationalExpr) -> complex:
    if isinstance(expr, Const):
        return complex(expr.matrix[0, 0])
    if isinstance(expr, Sum):
        return _constant_value(expr.lhs) + _constant_value(expr.rhs)
    if isinstance(expr, Product):
        return _constant_value(expr.lhs) * _constant_value(expr.rhs)
    if isinstance(expr, Inverse):
        value = _constant_value(expr.inner)
        if value == 0:
            raise ExprError("Inverse of zero inside a constant matrix literal")
        return 1.0 / value
    raise ExprError(f"Not a constant: {type(expr).__name__}")


def parse(src: Union[ExprSource, str], signature: Optional[Signature] = None) -> RationalExpr:
    """Parse expression text into an AST.

    Raises:
        ExprSyntaxError: on malformed text (with the character position)
        ShapeMismatch: on incompatible sizes
        UnknownVariable: when a variable index exceeds the signature
    """
    if isinstance(src, ExprSource):
        text, signature = src.text, src.signature or signature
    else:
        text = src
    expr = _Parser(text, signature).parse()
    shape(expr)
    return expr


def _format_number(value: float) -> str:
    return repr(float(value))


def format_complex(z: complex) -> str:
    z = complex(z)
    if z.imag == 0:
        return _format_number(z.real)
    if z.real == 0:
        return f"{_format_number(z.imag)}i"
    sign = "-" if z.imag < 0 else "+"
    return f"{_format_number(z.real)}{sign}{_format_number(abs(z.imag))}i"


def format_matrix(matrix: np.ndarray) -> str:
    rows = ", ".join("[" + ", ".join(format_complex(z) for z in row) + "]" for row in matrix)
    return f"[{rows}]"


def render(expr: RationalExpr) -> str:
    """Fully parenthesized canonical text; ``parse(render(e)) == e``."""
    if isinstance(expr, Const):
        return format_matrix(expr.matrix)
    if isinstance(expr, ScaledVar):
        if expr.matrix.shape == (1, 1) and expr.matrix[0, 0] == 1:
            return expr.var.name
        return f"kron({format_matrix(expr.matrix)}, {expr.var.name})"
    if isinstance(expr, Sum):
        return f"(({render(expr.lhs)}) + ({render(expr.rhs)}))"
    if isinstance(expr, Product):
        return f"(({render(expr.lhs)}) * ({render(expr.rhs)}))"
    if isinstance(expr, Inverse):
        return f"({render(expr.inner)})^-1"
    raise ExprError(f"Unknown node type {type(expr).__name__}")


_HEADER_RE = re.compile(r"^\s*signature:\s*d1\s*=\s*(\d+)\s+d2\s*=\s*(\d+)\s*$")


def read_expr_file(path: Union[str, Path]) -> ExprSource:
    """Read an expression file: a ``signature: d1=<n> d2=<m>`` header, then the expression."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    body = [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if not body:
        raise ExprSyntaxError(f"Empty expression file {path}", 0)
    m = _HEADER_RE.match(body[0])
    if not m:
        raise ExprSyntaxError(f"Missing 'signature: d1=<n> d2=<m>' header in {path}", 0)
    signature = Signature(int(m.group(1)), int(m.group(2)))
    return ExprSource("\n".join(body[1:]), signature)


def load_expr_file(path: Union[str, Path]) -> Tuple[RationalExpr, Signature]:
    src = read_expr_file(path)
    expr = parse(src)
    return expr, src.signature


def dump_expr_file(expr: RationalExpr, signature: Signature, path: Union[str, Path]) -> None:
    check_signature(expr, signature)
    Path(path).write_text(f"signature: {signature}\n{render(expr)}\n", encoding="utf-8")
