import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expr_parser import parse
from linearize import linearize, make_selfadjoint_rep
from matrix_eval import eval_expr, eval_pencil
from randmat import EnsembleSpec, rng_stream, sample_hermitian_gue, sample_tuple
from spectral import (
    Arcsine2,
    EmpiricalSpectrum,
    NotHermitian,
    PushforwardInverse,
    Semicircle,
    TabulatedCdf,
    atom_extrapolation,
    atom_fraction,
    cdf,
    cdf_by_quadrature,
    hermitian_eigenvalues,
    kolmogorov_distance,
    law_from_spec,
    normalized_rank,
    numerical_rank,
    rank_cdf_bound_check,
    read_tabulated_cdf,
    regularized_inverse_apply,
    regularized_inverse_from_eigh,
    regularized_reciprocal,
    spectral_projection,
    write_cdf_csv,
    write_spectrum_csv,
)


def test_eigenvalues_are_sorted():
    np.testing.assert_allclose(hermitian_eigenvalues(np.diag([3.0, 1.0, 2.0])).eigenvalues, [1, 2, 3])
    np.testing.assert_allclose(hermitian_eigenvalues(np.array([[0.0, 1.0], [1.0, 0.0]])).eigenvalues, [-1, 1])


def test_eigenvalues_reject_non_hermitian():
    with pytest.raises(NotHermitian):
        hermitian_eigenvalues(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(NotHermitian):
        hermitian_eigenvalues(np.ones((2, 3)))


def test_eigenvalues_match_trace_and_frobenius_norm():
    for seed in range(10):
        matrix = sample_hermitian_gue(30, seed=seed)
        values = hermitian_eigenvalues(matrix).eigenvalues
        assert values.sum() == pytest.approx(np.trace(matrix).real, abs=1e-8)
        assert np.sum(values**2) == pytest.approx(np.linalg.norm(matrix) ** 2, rel=1e-8)


def test_empirical_cdf():
    spectrum = EmpiricalSpectrum([3.0, 1.0, 2.0])
    assert cdf(spectrum, 2.0) == pytest.approx(2 / 3)
    assert spectrum.left_cdf(2.0) == pytest.approx(1 / 3)
    assert cdf(spectrum, 0.0) == 0.0
    assert cdf(spectrum, 10.0) == 1.0
    assert spectrum.dim == 3


def test_empty_spectrum_is_rejected():
    with pytest.raises(ValueError, match="at least one"):
        EmpiricalSpectrum([])


def test_arcsine_cdf():
    law = Arcsine2()
    assert cdf(law, 0.0) == pytest.approx(0.5)
    assert cdf(law, 1.0) == pytest.approx(2 / 3)
    assert cdf_by_quadrature(law, 1.0) == pytest.approx(2 / 3, abs=1e-8)


@pytest.mark.parametrize("t", [-1.5, -0.3, 0.0, 0.7, 1.9])
def test_semicircle_cdf_matches_quadrature(t):
    for law in (Semicircle(), Semicircle(2.0)):
        assert cdf(law, t) == pytest.approx(cdf_by_quadrature(law, t), abs=1e-8)


@pytest.mark.parametrize("t", [-3.0, -0.6, -0.1, 0.2, 0.5, 4.0])
def test_inverse_law_matches_quadrature(t):
    law = PushforwardInverse(Semicircle())
    assert cdf(law, t) == pytest.approx(cdf_by_quadrature(law, t), abs=1e-7)


def test_inverse_law_is_a_cdf():
    law = PushforwardInverse(Semicircle(2.0))
    ts = np.linspace(-20, 20, 4001)
    values = law.cdf(ts)
    assert np.all(np.diff(values) >= -1e-12)
    assert values[0] < 0.05 and values[-1] > 0.95
    assert law.cdf(0.0) == pytest.approx(0.5)


def test_law_specs():
    assert law_from_spec("semicircle") == Semicircle()
    assert law_from_spec("semicircle:2.0") == Semicircle(2.0)
    assert isinstance(law_from_spec("arcsine2"), Arcsine2)
    inverse = law_from_spec("inverse:semicircle:2.0")
    assert inverse == PushforwardInverse(Semicircle(2.0))
    assert law_from_spec(inverse.spec()) == inverse
    assert law_from_spec("surrogate") is None
    with pytest.raises(ValueError):
        law_from_spec("cauchy")
    with pytest.raises(ValueError):
        law_from_spec("inverse:surrogate")


def test_kolmogorov_examples():
    assert kolmogorov_distance(EmpiricalSpectrum([1.0, 2.0]), EmpiricalSpectrum([1.0, 2.0])) == 0.0
    assert kolmogorov_distance(EmpiricalSpectrum([0.0]), EmpiricalSpectrum([1.0])) == 1.0
    assert kolmogorov_distance(EmpiricalSpectrum([0.0, 1.0]), EmpiricalSpectrum([0.0, 2.0])) == 0.5


def test_kolmogorov_against_a_law_uses_both_sides_of_jumps():
    assert kolmogorov_distance(EmpiricalSpectrum([0.0]), Semicircle()) == pytest.approx(0.5)
    assert kolmogorov_distance(Semicircle(), EmpiricalSpectrum([0.0])) == pytest.approx(0.5)


def test_kolmogorov_between_laws():
    assert kolmogorov_distance(Semicircle(), Semicircle()) == 0.0
    assert 0.0 < kolmogorov_distance(Semicircle(), Arcsine2()) < 0.2


def test_kolmogorov_tolerates_rounding_with_atol():
    a = EmpiricalSpectrum([0.0, 1.0, 2.0])
    b = EmpiricalSpectrum([1e-12, 1.0 - 1e-12, 2.0])
    assert kolmogorov_distance(a, b) > 0.3
    assert kolmogorov_distance(a, b, atol=1e-9) == 0.0


_spectra = st.lists(st.integers(-20, 20).map(float), min_size=1, max_size=12).map(EmpiricalSpectrum)


@settings(max_examples=300)
@given(_spectra, _spectra, _spectra)
def test_kolmogorov_is_a_metric(a, b, c):
    ab = kolmogorov_distance(a, b)
    assert ab == kolmogorov_distance(b, a)
    assert 0.0 <= ab <= 1.0
    assert kolmogorov_distance(a, a) == 0.0
    assert kolmogorov_distance(a, c) <= ab + kolmogorov_distance(b, c) + 1e-12
    if ab == 0.0:
        grid = np.union1d(a.eigenvalues, b.eigenvalues)
        np.testing.assert_allclose(a.cdf(grid), b.cdf(grid))


def test_normalized_rank_examples():
    assert normalized_rank(np.eye(5)) == 1.0
    assert normalized_rank(np.zeros((4, 4))) == 0.0
    assert normalized_rank(np.diag([1.0, 0.0, 0.0, 0.0])) == 0.25
    assert numerical_rank(np.diag([1.0, 1e-12])) == 1


def test_atom_fraction_examples():
    spectrum = EmpiricalSpectrum([0.0, 0.0, 1.0, 2.0])
    assert atom_fraction(spectrum, 0.0, 0.1) == 0.5
    assert atom_fraction(spectrum, 5.0, 0.1) == 0.0
    with pytest.raises(ValueError):
        atom_fraction(spectrum, 0.0, 0.0)


@pytest.mark.slow
def test_atom_fraction_of_semicircle_sample():
    spectrum = hermitian_eigenvalues(sample_hermitian_gue(2000, seed=0))
    assert atom_fraction(spectrum, 0.0, 0.01) == pytest.approx(2 * 0.01 / math.pi, abs=0.01)


def test_atom_extrapolation_recovers_a_point_mass():
    rng = rng_stream(1)
    values = np.concatenate([np.zeros(500), rng.uniform(-1.0, 1.0, 500)])
    estimate = atom_extrapolation(EmpiricalSpectrum(values))
    assert estimate.eps_list == [0.1, 0.05, 0.01]
    assert estimate.fractions[0] > estimate.fractions[-1]
    assert estimate.extrapolated == pytest.approx(0.5, abs=0.02)


def test_atom_extrapolation_without_atom():
    rng = rng_stream(2)
    estimate = atom_extrapolation(EmpiricalSpectrum(rng.uniform(-1.0, 1.0, 4000)), eps_list=(0.2, 0.1, 0.05))
    assert estimate.extrapolated < 0.02


def test_regularized_reciprocal():
    np.testing.assert_allclose(regularized_reciprocal([2.0, 0.1, -0.1, 0.0, -4.0], 0.5), [0.5, 0.4, -0.4, 0.0, -0.25])
    with pytest.raises(ValueError):
        regularized_reciprocal(1.0, 0.0)


def test_regularized_inverse_examples():
    np.testing.assert_allclose(regularized_inverse_apply(np.diag([2.0, 0.1]), 0.5), np.diag([0.5, 0.4]), atol=1e-15)
    np.testing.assert_array_equal(regularized_inverse_apply(np.zeros((3, 3)), 0.1), np.zeros((3, 3)))
    matrix = sample_hermitian_gue(20, seed=3) + 5.0 * np.eye(20)
    np.testing.assert_allclose(regularized_inverse_apply(matrix, 0.5) @ matrix, np.eye(20), atol=1e-10)
    with pytest.raises(NotHermitian):
        regularized_inverse_apply(np.array([[1.0, 2.0], [0.0, 1.0]]), 0.1)


def test_spectrum_is_reconstructed_from_the_selfadjoint_pencil():
    expr = parse("x1 + inv(x2)")
    sa = make_selfadjoint_rep(linearize(expr))
    point = sample_tuple(EnsembleSpec(d1=2, n=30, seed=6))
    q = eval_pencil(sa.pencil, point)
    values, vectors = np.linalg.eigh(q)
    eps = 0.5 * np.min(np.abs(values))
    w = np.kron(sa.w, np.eye(point.n))
    reconstructed = w.conj().T @ regularized_inverse_from_eigh(values, vectors, eps) @ w
    direct = hermitian_eigenvalues(eval_expr(expr, point).unwrap()).eigenvalues
    rebuilt = hermitian_eigenvalues(reconstructed).eigenvalues
    np.testing.assert_allclose(rebuilt, direct, atol=1e-8 * (1.0 + np.abs(direct).max()))


def test_spectral_projection_trace_is_the_cdf():
    matrix = sample_hermitian_gue(40, seed=7)
    spectrum = hermitian_eigenvalues(matrix)
    for t in (-1.0, 0.0, 0.5):
        p = spectral_projection(matrix, t)
        np.testing.assert_allclose(p @ p, p, atol=1e-10)
        assert np.trace(p).real / 40 == pytest.approx(spectrum.cdf(t))


def test_rank_bound_with_zero_perturbation():
    x = sample_hermitian_gue(10, seed=8)
    report = rank_cdf_bound_check(x, np.zeros((10, 10)))
    assert report.passed
    assert report.rank_bound == 0.0
    assert report.max_distance == 0.0


def test_rank_bound_two_by_two():
    report = rank_cdf_bound_check(np.zeros((2, 2)), np.diag([0.0, 5.0]), grid=[-1.0, 0.0, 2.5, 5.0])
    assert report.rank_bound == 0.5
    assert report.max_distance == 0.5
    assert report.passed and report.decr_passed


def test_rank_bound_on_random_pairs():
    rng = rng_stream(9)
    for trial in range(500):
        x = sample_hermitian_gue(20, rng=rng)
        r = int(rng.integers(0, 6))
        v = rng.standard_normal((20, r)) + 1j * rng.standard_normal((20, r))
        y = v @ np.diag(rng.standard_normal(r)) @ v.conj().T if r else np.zeros((20, 20))
        report = rank_cdf_bound_check(x, y, projections=2, rng=rng)
        assert report.passed, f"trial {trial}: {report.max_distance} > {report.rank_bound}"
        assert report.decr_passed


def test_rank_bound_needs_equal_dimensions():
    with pytest.raises(ValueError):
        rank_cdf_bound_check(np.eye(2), np.eye(3))


def test_tabulated_cdf_validation():
    law = TabulatedCdf((0.0, 1.0, 2.0), (0.0, 0.25, 1.0), "inline")
    assert law.cdf(0.5) == pytest.approx(0.125)
    assert law.cdf(-1.0) == 0.0 and law.cdf(3.0) == 1.0
    np.testing.assert_allclose(law.density([0.5, 1.5, 5.0]), [0.25, 0.75, 0.0])
    with pytest.raises(ValueError):
        TabulatedCdf((0.0,), (0.0,))
    with pytest.raises(ValueError):
        TabulatedCdf((0.0, 1.0), (0.5, 0.2))
    with pytest.raises(ValueError):
        TabulatedCdf((1.0, 0.0), (0.0, 1.0))


def test_csv_exports(tmp_path):
    spectrum = EmpiricalSpectrum([0.5, -1.0])
    spectrum_path = tmp_path / "spectrum.csv"
    write_spectrum_csv(spectrum, spectrum_path)
    with open(spectrum_path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["index", "value"], ["0", "-1.0"], ["1", "0.5"]]

    cdf_path = tmp_path / "cdf.csv"
    write_cdf_csv([-2.0, 0.0, 2.0], [0.0, 0.5, 1.0], cdf_path)
    law = read_tabulated_cdf(cdf_path)
    assert law.cdf(1.0) == pytest.approx(0.75)
    assert law_from_spec(f"tabulated:{cdf_path}") == law
