"""
Spectra, CDFs and rank quantities at finite dimension.

The normalized trace plays the role of the trace of the limiting algebra:
the analytic distribution of a Hermitian matrix is its empirical eigenvalue
measure, the rank of a projection is its normalized trace.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.integrate
import scipy.linalg

logger = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-8
DEFAULT_EPS_SCHEDULE = (0.1, 0.05, 0.01)


class NotHermitian(ValueError):
    pass


def hermitian_defect(matrix: np.ndarray) -> float:
    """Relative distance ‖M − M*‖ / ‖M‖ (Frobenius); 0 for the zero matrix."""
    scale = np.linalg.norm(matrix)
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(matrix - matrix.conj().T) / scale)


def symmetrize(matrix: np.ndarray, tol: float = HERMITIAN_TOL) -> np.ndarray:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise NotHermitian(f"Expected a square matrix, got shape {matrix.shape}")
    defect = hermitian_defect(matrix)
    if defect > tol:
        raise NotHermitian(f"Matrix is not Hermitian (relative defect {defect:.3e} > {tol:.1e})")
    return (matrix + matrix.conj().T) / 2


@dataclass(frozen=True)
class EmpiricalSpectrum:
    eigenvalues: np.ndarray

    def __post_init__(self):
        values = np.sort(np.asarray(self.eigenvalues, dtype=float).ravel())
        if values.size == 0:
            raise ValueError("An empirical spectrum needs at least one eigenvalue")
        values.setflags(write=False)
        object.__setattr__(self, "eigenvalues", values)

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.size)

    def cdf(self, t):
        """Right-continuous step CDF ``#{λ ≤ t} / dim``."""
        counts = np.searchsorted(self.eigenvalues, t, side="right")
        return counts / self.dim

    def left_cdf(self, t):
        counts = np.searchsorted(self.eigenvalues, t, side="left")
        return counts / self.dim

    def support(self) -> Tuple[float, float]:
        return float(self.eigenvalues[0]), float(self.eigenvalues[-1])

    @classmethod
    def pooled(cls, spectra: Iterable["EmpiricalSpectrum"]) -> "EmpiricalSpectrum":
        return cls(np.concatenate([s.eigenvalues for s in spectra]))


class AnalyticLaw:
    """A named limit law with a continuous CDF."""

    name = "law"

    def cdf(self, t):
        raise NotImplementedError

    def density(self, t):
        raise NotImplementedError

    def support(self) -> Tuple[float, float]:
        raise NotImplementedError

    def spec(self) -> str:
        return self.name


@dataclass(frozen=True)
class Semicircle(AnalyticLaw):
    variance: float = 1.0
    name = "semicircle"

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError(f"Semicircle variance must be positive, got {self.variance}")

    @property
    def radius(self) -> float:
        return 2.0 * math.sqrt(self.variance)

    def density(self, t):
        t = np.asarray(t, dtype=float)
        r = self.radius
        inside = np.clip(r * r - t * t, 0.0, None)
        return np.sqrt(inside) / (2.0 * math.pi * self.variance)

    def cdf(self, t):
        r = self.radius
        s = np.clip(np.asarray(t, dtype=float), -r, r)
        return 0.5 + s * np.sqrt(r * r - s * s) / (4.0 * math.pi * self.variance) + np.arcsin(s / r) / math.pi

    def support(self) -> Tuple[float, float]:
        return (-self.radius, self.radius)

    def spec(self) -> str:
        return f"semicircle:{self.variance!r}"


@dataclass(frozen=True)
class Arcsine2(AnalyticLaw):
    """Law of ``2 cos θ`` for θ uniform: the spectral law of ``u + u⁻¹`` for Haar ``u``."""

    name = "arcsine2"

    def density(self, t):
        t = np.asarray(t, dtype=float)
        inside = np.abs(t) < 2.0
        gap = np.where(inside, 4.0 - t * t, 1.0)
        return np.where(inside, 1.0 / (math.pi * np.sqrt(gap)), 0.0)

    def cdf(self, t):
        s = np.clip(np.asarray(t, dtype=float), -2.0, 2.0)
        return 0.5 + np.arcsin(s / 2.0) / math.pi

    def support(self) -> Tuple[float, float]:
        return (-2.0, 2.0)


@dataclass(frozen=True)
class PushforwardInverse(AnalyticLaw):
    """Law of ``1/X`` for ``X`` distributed by ``base`` (no atom at 0)."""

    base: AnalyticLaw = field(default_factory=Semicircle)
    name = "inverse"

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        below_zero = self.base.cdf(0.0)
        reciprocal = 1.0 / np.where(t == 0, 1.0, t)
        base_at = np.asarray(self.base.cdf(reciprocal), dtype=float)
        return np.where(t > 0, below_zero + 1.0 - base_at, np.where(t < 0, below_zero - base_at, below_zero))

    def density(self, t):
        t = np.asarray(t, dtype=float)
        safe = np.where(t == 0, 1.0, t)
        return np.where(t != 0, np.asarray(self.base.density(1.0 / safe)) / (safe * safe), 0.0)

    def support(self) -> Tuple[float, float]:
        return (-math.inf, math.inf)

    def spec(self) -> str:
        return f"inverse:{self.base.spec()}"


@dataclass(frozen=True)
class TabulatedCdf(AnalyticLaw):
    """Piecewise-linear CDF through a grid of (t, F(t)) points."""

    grid: Tuple[float, ...] = ()
    values: Tuple[float, ...] = ()
    source: str = ""
    name = "tabulated"

    def __post_init__(self):
        if len(self.grid) < 2 or len(self.grid) != len(self.values):
            raise ValueError("Tabulated CDF needs at least two (t, F) points")
        if np.any(np.diff(self.grid) <= 0) or np.any(np.diff(self.values) < 0):
            raise ValueError("Tabulated CDF grid must increase and values must not decrease")
        if self.values[0] < 0 or self.values[-1] > 1:
            raise ValueError("Tabulated CDF values must lie in [0, 1]")

    def cdf(self, t):
        return np.interp(t, self.grid, self.values, left=0.0, right=1.0)

    def density(self, t):
        slopes = np.diff(self.values) / np.diff(self.grid)
        idx = np.searchsorted(self.grid, t, side="right") - 1
        inside = (idx >= 0) & (idx < len(slopes))
        return np.where(inside, slopes[np.clip(idx, 0, len(slopes) - 1)], 0.0)

    def support(self) -> Tuple[float, float]:
        return (self.grid[0], self.grid[-1])

    def spec(self) -> str:
        return f"tabulated:{self.source}"


CdfQueryable = Union[EmpiricalSpectrum, AnalyticLaw]


def law_from_spec(text: str) -> Optional[AnalyticLaw]:
    """Parse a reference spec string; ``surrogate`` yields None.

    Accepted forms: ``semicircle[:variance]``, ``arcsine2``, ``inverse:<spec>``,
    ``tabulated:<csv path>``, ``surrogate``.
    """
    text = text.strip()
    head, _, rest = text.partition(":")
    if head == "surrogate":
        return None
    if head == "semicircle":
        return Semicircle(float(rest)) if rest else Semicircle()
    if head == "arcsine2":
        return Arcsine2()
    if head == "inverse":
        base = law_from_spec(rest)
        if base is None:
            raise ValueError("inverse: needs an analytic base law")
        return PushforwardInverse(base)
    if head == "tabulated":
        return read_tabulated_cdf(rest)
    raise ValueError(f"Unknown reference law {text!r}")


def cdf(q: CdfQueryable, t):
    return q.cdf(t)


def cdf_by_quadrature(law: AnalyticLaw, t: float) -> float:
    """Integrate the density of ``law`` up to ``t`` (absolute error ≤ 1e-8)."""
    lo, hi = law.support()
    if t <= lo:
        return 0.0
    upper = min(t, hi)
    density = lambda s: float(law.density(np.array([s]))[0])  # noqa: E731
    if math.isinf(lo):
        # split at the points where the pushforward densities are concentrated
        pieces = [(-math.inf, -1.0), (-1.0, 0.0), (0.0, 1.0), (1.0, math.inf)]
    else:
        pieces = [(lo, hi)]
    total = 0.0
    for a, b in pieces:
        b = min(b, upper)
        if b <= a:
            continue
        value, _ = scipy.integrate.quad(density, a, b, epsabs=1e-10, epsrel=1e-10, limit=200)
        total += value
    return min(max(total, 0.0), 1.0)


def hermitian_eigenvalues(matrix: np.ndarray, tol: float = HERMITIAN_TOL) -> EmpiricalSpectrum:
    """Sorted real eigenvalues of a (numerically) Hermitian matrix.

    Raises:
        NotHermitian: if ‖M − M*‖ > tol·‖M‖
    """
    herm = symmetrize(matrix, tol)
    return EmpiricalSpectrum(scipy.linalg.eigvalsh(herm, check_finite=False))


def kolmogorov_distance(
    a: CdfQueryable, b: CdfQueryable, grid_points: int = 20001, atol: float = 0.0
) -> float:
    """``sup_t |F_a(t) − F_b(t)|``.

    Exact whenever at least one side is empirical: the supremum is attained at
    the jump points, checked from both sides. Two analytic laws are compared on
    a dense grid. For two empirical spectra ``atol`` shifts the comparison so
    that eigenvalue lists agreeing within ``atol`` are at distance 0.
    """
    if isinstance(a, EmpiricalSpectrum) and isinstance(b, EmpiricalSpectrum):
        return max(0.0, _shifted_excess(a, b, atol), _shifted_excess(b, a, atol))
    if isinstance(b, EmpiricalSpectrum):
        a, b = b, a
    if isinstance(a, EmpiricalSpectrum):
        jumps = a.eigenvalues
        reference = np.asarray(b.cdf(jumps), dtype=float)
        right = np.abs(a.cdf(jumps) - reference)
        left = np.abs(a.left_cdf(jumps) - reference)
        return float(max(right.max(), left.max()))
    lo_a, hi_a = _finite_window(a)
    lo_b, hi_b = _finite_window(b)
    grid = np.linspace(min(lo_a, lo_b), max(hi_a, hi_b), grid_points)
    return float(np.max(np.abs(np.asarray(a.cdf(grid)) - np.asarray(b.cdf(grid)))))


def _shifted_excess(a: EmpiricalSpectrum, b: EmpiricalSpectrum, atol: float) -> float:
    # sup_t F_a(t) − F_b(t + atol); attained where F_a jumps
    t = a.eigenvalues
    return float(np.max(a.cdf(t) - b.cdf(t + atol)))


def _finite_window(law: AnalyticLaw) -> Tuple[float, float]:
    lo, hi = law.support()
    return (lo if math.isfinite(lo) else -50.0, hi if math.isfinite(hi) else 50.0)


def singular_values(matrix: np.ndarray) -> np.ndarray:
    return scipy.linalg.svdvals(np.asarray(matrix), check_finite=False)


def numerical_rank(matrix: np.ndarray, tol: float = 1e-10) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    s = singular_values(matrix)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def normalized_rank(matrix: np.ndarray, tol: float = 1e-10) -> float:
    """Rank divided by the dimension; the finite analogue of the trace of the range projection."""
    matrix = np.asarray(matrix)
    return numerical_rank(matrix, tol) / matrix.shape[0]


def atom_fraction(spectrum: EmpiricalSpectrum, value: float, eps: float) -> float:
    """Fraction of eigenvalues within the closed window ``[value − eps, value + eps]``."""
    if eps <= 0:
        raise ValueError(f"Window half-width must be positive, got {eps}")
    lo = np.searchsorted(spectrum.eigenvalues, value - eps, side="left")
    hi = np.searchsorted(spectrum.eigenvalues, value + eps, side="right")
    return float(hi - lo) / spectrum.dim


@dataclass
class AtomEstimate:
    value: float
    eps_list: List[float]
    fractions: List[float]
    extrapolated: float


def atom_extrapolation(
    spectrum: EmpiricalSpectrum, value: float = 0.0, eps_list: Sequence[float] = DEFAULT_EPS_SCHEDULE
) -> AtomEstimate:
    """Window fractions for a schedule of ε and their linear extrapolation to ε → 0."""
    eps = [float(e) for e in eps_list]
    fractions = [atom_fraction(spectrum, value, e) for e in eps]
    if len(eps) == 1:
        extrapolated = fractions[0]
    else:
        slope, intercept = np.polyfit(eps, fractions, 1)
        extrapolated = float(intercept)
    return AtomEstimate(value, eps, fractions, float(min(max(extrapolated, 0.0), 1.0)))


def regularized_reciprocal(t, eps: float):
    """``f_ε``: ``1/t`` for ``|t| ≥ ε`` and the odd linear interpolation ``t/ε²`` inside."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    t = np.asarray(t, dtype=float)
    safe = np.where(t == 0, 1.0, t)
    return np.where(np.abs(t) >= eps, 1.0 / safe, t / (eps * eps))


def regularized_inverse_apply(matrix: np.ndarray, eps: float) -> np.ndarray:
    """Functional calculus ``f_ε(Q)`` of a Hermitian matrix via its eigendecomposition.

    Raises:
        NotHermitian: if the input is not Hermitian within tolerance
    """
    herm = symmetrize(matrix)
    values, vectors = scipy.linalg.eigh(herm, check_finite=False)
    return regularized_inverse_from_eigh(values, vectors, eps)


def regularized_inverse_from_eigh(values: np.ndarray, vectors: np.ndarray, eps: float) -> np.ndarray:
    """``f_ε`` applied through an existing eigendecomposition (reused across an ε schedule)."""
    result = (vectors * regularized_reciprocal(values, eps)) @ vectors.conj().T
    return (result + result.conj().T) / 2


def spectral_projection(matrix: np.ndarray, t: float) -> np.ndarray:
    """Projection onto the eigenvectors with eigenvalue ≤ t.

    Its normalized trace is ``F_X(t)`` and it maximizes ``τ(p)`` among
    projections with ``p(t − X)p ≥ 0``.
    """
    herm = symmetrize(matrix)
    values, vectors = scipy.linalg.eigh(herm, check_finite=False)
    below = vectors[:, values <= t]
    return below @ below.conj().T


@dataclass
class RankBoundReport:
    passed: bool
    rank_bound: float
    max_distance: float
    violating_t: Optional[float] = None
    decr_passed: bool = True
    decr_violations: List[Tuple[float, float]] = field(default_factory=list)


def rank_cdf_bound_check(
    x_matrix: np.ndarray,
    y_matrix: np.ndarray,
    grid: Optional[Sequence[float]] = None,
    projections: int = 5,
    rng: Optional[np.random.Generator] = None,
    tol: float = 1e-12,
) -> RankBoundReport:
    """Check ``sup_t |F_X − F_{X+Y}| ≤ rk(Y)`` and ``rk(pXp) ≤ rk(X)`` for random projections."""
    x_matrix = symmetrize(x_matrix)
    y_matrix = symmetrize(y_matrix)
    if x_matrix.shape != y_matrix.shape:
        raise ValueError(f"Dimension mismatch: {x_matrix.shape} vs {y_matrix.shape}")
    n = x_matrix.shape[0]
    bound = normalized_rank(y_matrix)

    spec_x = hermitian_eigenvalues(x_matrix)
    spec_xy = hermitian_eigenvalues(x_matrix + y_matrix)
    points = np.union1d(spec_x.eigenvalues, spec_xy.eigenvalues)
    if grid is not None:
        points = np.union1d(points, np.asarray(grid, dtype=float))
    gaps = np.abs(spec_x.cdf(points) - spec_xy.cdf(points))
    worst = int(np.argmax(gaps))
    max_distance = float(gaps[worst])
    passed = max_distance <= bound + tol
    violating = None if passed else float(points[worst])

    rng = rng if rng is not None else np.random.default_rng(0)
    rank_x = normalized_rank(x_matrix)
    violations = []
    for _ in range(projections):
        r = int(rng.integers(1, n + 1))
        ginibre = rng.standard_normal((n, r)) + 1j * rng.standard_normal((n, r))
        basis, _ = np.linalg.qr(ginibre)
        p = basis @ basis.conj().T
        rank_pxp = normalized_rank(p @ x_matrix @ p)
        if rank_pxp > rank_x + tol:
            violations.append((rank_pxp, rank_x))
    if not passed:
        logger.warning("Rank CDF bound violated at t=%s: %.3e > %.3e", violating, max_distance, bound)
    return RankBoundReport(passed, bound, max_distance, violating, not violations, violations)


def write_spectrum_csv(spectrum: EmpiricalSpectrum, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "value"])
        for i, value in enumerate(spectrum.eigenvalues):
            writer.writerow([i, repr(float(value))])


def write_cdf_csv(ts: Sequence[float], values: Sequence[float], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "F"])
        for t, value in zip(ts, values):
            writer.writerow([repr(float(t)), repr(float(value))])


def read_tabulated_cdf(path: Union[str, Path]) -> TabulatedCdf:
    ts, values = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ts.append(float(row["t"]))
            values.append(float(row["F"]))
    return TabulatedCdf(tuple(ts), tuple(values), str(path))
