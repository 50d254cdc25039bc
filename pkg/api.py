import logging
from contextlib import asynccontextmanager
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv
from fastapi import Depends, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field
from sqlalchemy.orm import Session

from codec import ComplexMatrix, MatrixTupleModel, PencilModel, encode_matrix, rep_to_model
from db import get_db, list_runs
from expr_core import ExprError, RationalExpr, Signature, infer_signature, is_selfadjoint_multi, shape
from expr_parser import parse, render
from expression_library import ExpressionLibrary
from harness import test_fullness
from linearize import linearize, make_selfadjoint_rep, normalize_weight, schur_pencil
from matrix_eval import eval_expr
from randmat import EnsembleSpec, sample_tuple

load_dotenv()
logger = logging.getLogger(__name__)

expression_library: Optional[ExpressionLibrary] = None


@asynccontextmanager
async def lifespan(app: FastAPI):
    # Startup: load the expression library
    global expression_library
    try:
        expression_library = ExpressionLibrary()
    except Exception as e:
        logger.warning("Failed to load the expression library: %s", e)
    yield


app = FastAPI(
    title="ratspec API",
    description="Parse, linearize and evaluate noncommutative rational expressions at random matrices",
    version="0.1.0",
    lifespan=lifespan,
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],  # Allows all origins in development
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# Pydantic models
class SignatureBody(BaseModel):
    d1: int = Field(ge=0)
    d2: int = Field(ge=0)


class ExpressionRequest(BaseModel):
    text: str
    signature: Optional[SignatureBody] = None


class ParseResponse(BaseModel):
    expression: str
    signature: SignatureBody
    shape: List[int]


class LinearizeRequest(ExpressionRequest):
    selfadjoint: bool = False
    normalize: bool = False
    schur: bool = False
    compact_atoms: bool = True


class EvalRequest(ExpressionRequest):
    point: Optional[MatrixTupleModel] = None
    n: int = Field(default=4, ge=1)
    seed: int = Field(default=0, ge=0)
    sample_index: int = Field(default=0, ge=0)
    inv_tol: float = Field(default=1e-10, gt=0)


class EvalResponse(BaseModel):
    ok: bool
    N: int
    value: Optional[ComplexMatrix] = None
    failure: Optional[str] = None


class SaCheckRequest(ExpressionRequest):
    n_list: List[int] = [2, 4, 8]
    trials: int = Field(default=20, ge=1)
    tol: float = Field(default=1e-8, gt=0)
    seed: int = Field(default=0, ge=0)


class SaCheckResponse(BaseModel):
    selfadjoint: bool
    N: int
    evaluated: int
    max_defect: float
    domain_failures: int


class FullnessRequest(BaseModel):
    pencil: PencilModel
    n_list: List[int] = [1, 2, 4, 8]
    trials: int = Field(default=5, ge=1)
    seed: int = Field(default=0, ge=0)


class FullnessResponse(BaseModel):
    verdict: str
    N: Optional[int] = None
    best_scaled_min_sv: float
    trials: int


class LibraryEntry(BaseModel):
    name: str
    text: str
    signature: str
    shape: List[int]
    description: str


class RunEntry(BaseModel):
    run_id: str
    status: str
    expression: str
    seed: int
    max_n: Optional[int] = None
    mean_ks_at_max_n: Optional[float] = None
    started_at: Optional[datetime] = None

    model_config = {"from_attributes": True}


def _parse_request(request: ExpressionRequest) -> Tuple[RationalExpr, Signature]:
    try:
        declared = Signature(request.signature.d1, request.signature.d2) if request.signature else None
        expr = parse(request.text, declared)
    except ExprError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return expr, declared or infer_signature(expr)


@app.post("/parse", response_model=ParseResponse)
async def parse_expression(request: ExpressionRequest):
    expr, signature = _parse_request(request)
    return ParseResponse(
        expression=render(expr),
        signature=SignatureBody(d1=signature.d1, d2=signature.d2),
        shape=list(shape(expr)),
    )


@app.post("/linearize")
async def linearize_expression(request: LinearizeRequest) -> Dict[str, Any]:
    expr, signature = _parse_request(request)
    try:
        rep = linearize(expr, signature, compact_atoms=request.compact_atoms)
        if request.schur:
            return PencilModel.from_pencil(schur_pencil(rep)).model_dump()
        if request.selfadjoint or request.normalize:
            rep = make_selfadjoint_rep(rep, signature)
        if request.normalize:
            rep = normalize_weight(rep)
    except ExprError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return rep_to_model(rep).model_dump()


@app.post("/eval", response_model=EvalResponse)
async def evaluate(request: EvalRequest):
    expr, signature = _parse_request(request)
    try:
        if request.point is not None:
            point = request.point.to_tuple()
        else:
            spec = EnsembleSpec(d1=signature.d1, d2=signature.d2, n=request.n, seed=request.seed)
            point = sample_tuple(spec, request.sample_index)
        outcome = eval_expr(expr, point, request.inv_tol)
    except ExprError as e:
        raise HTTPException(status_code=400, detail=str(e))
    if not outcome.ok:
        return EvalResponse(ok=False, N=point.n, failure=outcome.failure.describe())
    return EvalResponse(ok=True, N=point.n, value=encode_matrix(outcome.value))


@app.post("/sa-check", response_model=SaCheckResponse)
async def sa_check(request: SaCheckRequest):
    expr, signature = _parse_request(request)
    try:
        verdict = is_selfadjoint_multi(expr, request.n_list, request.trials, request.tol, request.seed, signature)
    except ExprError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return SaCheckResponse(
        selfadjoint=verdict.selfadjoint,
        N=verdict.n,
        evaluated=verdict.evaluated,
        max_defect=verdict.max_defect,
        domain_failures=verdict.domain_failures,
    )


@app.post("/fullness", response_model=FullnessResponse)
async def fullness(request: FullnessRequest):
    try:
        verdict = test_fullness(request.pencil.to_pencil(), request.n_list, request.trials, request.seed)
    except ExprError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return FullnessResponse(
        verdict="Full" if verdict.full else "ProbablyNotFull",
        N=verdict.n,
        best_scaled_min_sv=verdict.best_scaled_min_sv,
        trials=verdict.trials,
    )


# Expression library endpoints
@app.get("/expressions", response_model=List[LibraryEntry])
async def list_expressions():
    """List all shipped expressions."""
    if expression_library is None:
        raise HTTPException(status_code=500, detail="Expression library not initialized")
    return [LibraryEntry(**entry) for entry in expression_library.list_expressions().values()]


@app.get("/expressions/{name}", response_model=LibraryEntry)
async def get_expression(name: str):
    if expression_library is None:
        raise HTTPException(status_code=500, detail="Expression library not initialized")
    entries = expression_library.list_expressions()
    if name not in entries:
        raise HTTPException(status_code=404, detail=f"Expression not found: {name}")
    return LibraryEntry(**entries[name])


# Run ledger
@app.get("/runs", response_model=List[RunEntry])
def recent_runs(limit: int = 20, db: Session = Depends(get_db)):
    """Most recent recorded convergence runs."""
    return [RunEntry.model_validate(run) for run in list_runs(limit, session=db)]


# Health endpoint
@app.get("/health")
async def health():
    return {
        "status": "healthy",
        "timestamp": datetime.utcnow(),
        "expressions_loaded": len(expression_library.expressions) if expression_library else 0,
    }


if __name__ == "__main__":
    import uvicorn

    logging.basicConfig(level=logging.INFO)
    # For development with auto-reload, run this command instead:
    # uvicorn api:app --host 127.0.0.1 --port 5001 --reload
    uvicorn.run(app, host="127.0.0.1", port=5001)
