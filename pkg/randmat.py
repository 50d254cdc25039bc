"""
Seeded samplers for the absolutely continuous random matrix models.

Every draw comes from its own counter-based stream keyed by
``(seed, N, sample index, variable kind, variable index)``, so a tuple is the
same whichever thread or process produces it.
"""

import logging
from typing import Annotated, Callable, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from expr_core import Signature, VarKind
from matrix_eval import MatrixTuple

logger = logging.getLogger(__name__)

_KIND_CODE = {VarKind.SELFADJOINT: 0, VarKind.UNITARY: 1}


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for ``seed`` and a tuple of non-negative integer keys."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(key))))


def _generator(seed: Optional[int], rng: Optional[np.random.Generator]) -> np.random.Generator:
    if rng is not None:
        return rng
    return rng_stream(0 if seed is None else seed)


def sample_hermitian_gue(
    n: int, seed: Optional[int] = None, rng: Optional[np.random.Generator] = None, variance: float = 1.0
) -> np.ndarray:
    """GUE matrix normalized so the spectrum fills ``[-2σ, 2σ]`` with σ² = variance.

    Diagonal entries are real N(0, σ²/N); real and imaginary parts above the
    diagonal are N(0, σ²/(2N)). The lower triangle is the exact conjugate.
    """
    if n < 1:
        raise ValueError(f"N must be >= 1, got {n}")
    if variance <= 0:
        raise ValueError(f"variance must be positive, got {variance}")
    gen = _generator(seed, rng)
    off_scale = np.sqrt(variance / (2 * n))
    upper = np.triu(gen.normal(0.0, off_scale, (n, n)) + 1j * gen.normal(0.0, off_scale, (n, n)), k=1)
    matrix = upper + upper.conj().T
    matrix[np.diag_indices(n)] = gen.normal(0.0, np.sqrt(variance / n), n)
    return matrix


def sample_ginibre(n: int, rng: Optional[np.random.Generator] = None, cols: Optional[int] = None) -> np.ndarray:
    """Complex Ginibre matrix with i.i.d. standard complex Gaussian entries."""
    gen = _generator(None, rng)
    cols = n if cols is None else cols
    return (gen.standard_normal((n, cols)) + 1j * gen.standard_normal((n, cols))) / np.sqrt(2.0)


def sample_haar_unitary(n: int, seed: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Haar unitary by QR of a Ginibre matrix with the phases of R's diagonal moved into Q."""
    if n < 1:
        raise ValueError(f"N must be >= 1, got {n}")
    q, r = np.linalg.qr(sample_ginibre(n, _generator(seed, rng)))
    diagonal = np.diag(r)
    return q * (diagonal / np.abs(diagonal))


def _semicircle_spectrum(n: int, rng: np.random.Generator) -> np.ndarray:
    return 4.0 * rng.beta(1.5, 1.5, n) - 2.0


def _uniform_spectrum(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, n)


def _arcsine_spectrum(n: int, rng: np.random.Generator) -> np.ndarray:
    return 2.0 * np.cos(2.0 * np.pi * rng.uniform(0.0, 1.0, n))


# non-atomic laws only
SPECTRUM_SAMPLERS: Dict[str, Callable[[int, np.random.Generator], np.ndarray]] = {
    "semicircle": _semicircle_spectrum,
    "uniform": _uniform_spectrum,
    "arcsine": _arcsine_spectrum,
}


def sample_fixed_spectrum(
    n: int, spectrum: str, seed: Optional[int] = None, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """``V diag(λ) V*`` with ``V`` Haar and ``λ`` i.i.d. from a named spectrum sampler."""
    if spectrum not in SPECTRUM_SAMPLERS:
        raise ValueError(f"Unknown spectrum sampler {spectrum!r}; known: {sorted(SPECTRUM_SAMPLERS)}")
    gen = _generator(seed, rng)
    values = SPECTRUM_SAMPLERS[spectrum](n, gen)
    v = sample_haar_unitary(n, rng=gen)
    matrix = (v * values) @ v.conj().T
    return (matrix + matrix.conj().T) / 2


class GaussianHermitian(BaseModel):
    model: Literal["gue"] = "gue"
    variance: float = Field(default=1.0, gt=0)


class FixedSpectrumHaarConjugated(BaseModel):
    model: Literal["fixed_spectrum"] = "fixed_spectrum"
    spectrum: str = "semicircle"

    @field_validator("spectrum")
    @classmethod
    def known_spectrum(cls, value: str) -> str:
        if value not in SPECTRUM_SAMPLERS:
            raise ValueError(f"Unknown spectrum sampler {value!r}; known: {sorted(SPECTRUM_SAMPLERS)}")
        return value


SelfAdjointModel = Annotated[Union[GaussianHermitian, FixedSpectrumHaarConjugated], Field(discriminator="model")]


class EnsembleSpec(BaseModel):
    """Which matrix model each variable is drawn from, at which size, from which seed."""

    d1: int = Field(default=1, ge=0)
    d2: int = Field(default=0, ge=0)
    n: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    selfadj_model: SelfAdjointModel = Field(default_factory=GaussianHermitian)
    selfadj_models: Optional[List[SelfAdjointModel]] = None

    @model_validator(mode="after")
    def models_match_d1(self) -> "EnsembleSpec":
        if self.selfadj_models is not None and len(self.selfadj_models) != self.d1:
            raise ValueError(f"selfadj_models has {len(self.selfadj_models)} entries for d1={self.d1}")
        return self

    @property
    def signature(self) -> Signature:
        return Signature(self.d1, self.d2)

    def model_for(self, index: int):
        """Model of ``x_index`` (1-based)."""
        if self.selfadj_models is not None:
            return self.selfadj_models[index - 1]
        return self.selfadj_model

    def at(self, n: int) -> "EnsembleSpec":
        return self.model_copy(update={"n": n})


def sample_selfadjoint(spec: EnsembleSpec, index: int, sample_index: int = 0) -> np.ndarray:
    rng = rng_stream(spec.seed, spec.n, sample_index, _KIND_CODE[VarKind.SELFADJOINT], index)
    model = spec.model_for(index)
    if isinstance(model, GaussianHermitian):
        return sample_hermitian_gue(spec.n, rng=rng, variance=model.variance)
    return sample_fixed_spectrum(spec.n, model.spectrum, rng=rng)


def sample_unitary(spec: EnsembleSpec, index: int, sample_index: int = 0) -> np.ndarray:
    rng = rng_stream(spec.seed, spec.n, sample_index, _KIND_CODE[VarKind.UNITARY], index)
    return sample_haar_unitary(spec.n, rng=rng)


def sample_tuple(spec: EnsembleSpec, sample_index: int = 0) -> MatrixTuple:
    """Independent draws for every variable; a pure function of ``(spec, sample_index)``."""
    xs = [sample_selfadjoint(spec, j, sample_index) for j in range(1, spec.d1 + 1)]
    us = [sample_unitary(spec, j, sample_index) for j in range(1, spec.d2 + 1)]
    return MatrixTuple(spec.n, tuple(xs), tuple(us))


def sample_general_point(d1: int, d2: int, n: int, rng: np.random.Generator):
    """Ginibre matrices in every slot, for checks over all complex matrices."""
    xs = [sample_ginibre(n, rng) for _ in range(d1)]
    us = [sample_ginibre(n, rng) for _ in range(d2)]
    return xs, us
