"""
JSON wire format for matrices, pencils, representations and matrix tuples.

Complex entries are ``[re, im]`` pairs; matrices are lists of rows.
"""

import json
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from expr_core import ExprError
from linearize import AffinePencil, FormalLinRep, SaLinRep, pencil_from_coefficients
from matrix_eval import MatrixTuple

ComplexMatrix = List[List[Tuple[float, float]]]


def encode_matrix(matrix: np.ndarray) -> ComplexMatrix:
    arr = np.atleast_2d(np.asarray(matrix, dtype=complex))
    return [[(float(z.real), float(z.imag)) for z in row] for row in arr]


def decode_matrix(rows: ComplexMatrix) -> np.ndarray:
    if not rows:
        raise ValueError("Matrix must have at least one row")
    return np.array([[complex(re, im) for re, im in row] for row in rows], dtype=complex)


class PencilModel(BaseModel):
    k: int = Field(ge=1)
    A0: ComplexMatrix
    Aj: List[ComplexMatrix] = []
    Bj: List[ComplexMatrix] = []
    paired: bool = False

    @classmethod
    def from_pencil(cls, pencil: AffinePencil) -> "PencilModel":
        return cls(
            k=pencil.k,
            A0=encode_matrix(pencil.a0),
            Aj=[encode_matrix(c) for c in pencil.selfadj_coeffs],
            Bj=[encode_matrix(b) for b in pencil.unitary_coeffs],
            paired=pencil.paired,
        )

    def to_pencil(self) -> AffinePencil:
        a0 = decode_matrix(self.A0)
        if a0.shape != (self.k, self.k):
            raise ExprError(f"A0 has shape {a0.shape}, expected {self.k}x{self.k}")
        return pencil_from_coefficients(
            a0,
            [decode_matrix(c) for c in self.Aj],
            [decode_matrix(b) for b in self.Bj],
            self.paired,
        )


class FormalRepModel(PencilModel):
    u: ComplexMatrix
    v: ComplexMatrix
    proper: Optional[bool] = None

    @classmethod
    def from_rep(cls, rep: FormalLinRep) -> "FormalRepModel":
        base = PencilModel.from_pencil(rep.pencil).model_dump()
        return cls(**base, u=encode_matrix(rep.u), v=encode_matrix(rep.v), proper=rep.proper)

    def to_rep(self) -> FormalLinRep:
        return FormalLinRep(decode_matrix(self.u), self.to_pencil(), decode_matrix(self.v))


class SaRepModel(PencilModel):
    w: ComplexMatrix
    paired: bool = True
    proper: Optional[bool] = None

    @classmethod
    def from_rep(cls, rep: SaLinRep) -> "SaRepModel":
        base = PencilModel.from_pencil(rep.pencil).model_dump()
        return cls(**base, w=encode_matrix(rep.w), proper=rep.proper)

    def to_rep(self) -> SaLinRep:
        return SaLinRep(self.to_pencil(), decode_matrix(self.w))


class MatrixTupleModel(BaseModel):
    N: int = Field(ge=1)
    Xs: List[ComplexMatrix] = []
    Us: List[ComplexMatrix] = []

    @classmethod
    def from_tuple(cls, point: MatrixTuple) -> "MatrixTupleModel":
        return cls(N=point.n, Xs=[encode_matrix(x) for x in point.xs], Us=[encode_matrix(u) for u in point.us])

    def to_tuple(self) -> MatrixTuple:
        return MatrixTuple(self.N, tuple(decode_matrix(x) for x in self.Xs), tuple(decode_matrix(u) for u in self.Us))


def rep_to_model(rep: Union[FormalLinRep, SaLinRep]) -> Union[FormalRepModel, SaRepModel]:
    if isinstance(rep, SaLinRep):
        return SaRepModel.from_rep(rep)
    return FormalRepModel.from_rep(rep)


def rep_to_json(rep: Union[FormalLinRep, SaLinRep], indent: Optional[int] = 2) -> str:
    return json.dumps(rep_to_model(rep).model_dump(), indent=indent)


def rep_from_json(text: str) -> Union[FormalLinRep, SaLinRep]:
    data = json.loads(text)
    if "w" in data:
        return SaRepModel.model_validate(data).to_rep()
    return FormalRepModel.model_validate(data).to_rep()


def tuple_to_json(point: MatrixTuple, indent: Optional[int] = None) -> str:
    return json.dumps(MatrixTupleModel.from_tuple(point).model_dump(), indent=indent)


def tuple_from_json(text: str) -> MatrixTuple:
    return MatrixTupleModel.model_validate_json(text).to_tuple()
