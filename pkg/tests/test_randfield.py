import numpy as np
import pytest
from hypothesis import given, strategies as st

from ckrdduq.randfield import (EllipticityError, FieldConfig, KLBasis, kl_expand, sample_truncated_normal,
                               trapezoid_weights, truncated_normal_logpdf, truncated_normal_std)

GRID = np.linspace(0.0, 1.0, 17)


@pytest.fixture(scope="module")
def basis():
    return kl_expand(FieldConfig(2.0, 0.5, 1.0, 14), GRID, GRID)


def test_sigma_zero_gives_constant_field():
    b = kl_expand(FieldConfig(3.0, 0.0, 1.0, 4), GRID, GRID)
    assert np.all(b.eigenvalues == 0)
    assert np.all(b.evaluate(np.ones(4)) == 3.0)


def test_benchmark_configuration_shapes(basis):
    assert basis.modes == 14 and basis.functions.shape == (17 * 17, 14)


def test_eigenvalue_sum_matches_trace():
    b = kl_expand(FieldConfig(2.0, 0.5, 1.0, 17 * 17), GRID, GRID)
    assert abs(b.eigenvalues.sum() - 0.25 * 1.0) < 1e-10  # sigma^2 * area
    assert abs(b.trace - 0.25) < 1e-12


def test_orthonormal_and_sorted(basis):
    G = basis.functions.T @ (basis.weights[:, None] * basis.functions)
    assert np.max(np.abs(G - np.eye(14))) < 1e-8
    assert np.all(np.diff(basis.eigenvalues) <= 0) and np.all(basis.eigenvalues >= 0)


def test_zero_coordinates_give_mean(basis):
    assert np.allclose(basis.evaluate(np.zeros(14)), 2.0, rtol=0, atol=1e-15)


@given(st.lists(st.floats(-1, 1), min_size=14, max_size=14), st.lists(st.floats(-1, 1), min_size=14, max_size=14))
def test_field_is_affine(basis, x1, x2):
    x1, x2 = np.array(x1) / 2, np.array(x2) / 2
    a0 = basis.evaluate(np.zeros(14))
    lhs = basis.evaluate(x1 + x2) - a0
    rhs = (basis.evaluate(x1) - a0) + (basis.evaluate(x2) - a0)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_ellipticity_floor():
    b = kl_expand(FieldConfig(0.1, 2.0, 1.0, 2), GRID, GRID)
    with pytest.raises(EllipticityError):
        b.evaluate(np.array([-3.0, 0.0]))


def test_nodal_variance_monte_carlo(basis):
    xi = sample_truncated_normal(100_000, 14, np.random.default_rng(0))
    a = basis.evaluate(xi)
    expected = (basis.functions ** 2) @ basis.eigenvalues * truncated_normal_std() ** 2
    assert np.max(np.abs(a.var(axis=0) / expected - 1)) < 0.05


def test_truncated_normal_moments():
    x = sample_truncated_normal(1_000_000, 1, np.random.default_rng(1))
    assert np.all(np.abs(x) <= 1)
    assert truncated_normal_std() == pytest.approx(0.4398, abs=1e-4)
    assert abs(x.std() / 0.4398 - 1) < 0.01
    assert abs(x.mean()) < 3 * x.std() / 1000


def test_sampling_is_seeded():
    a = sample_truncated_normal(10, 3, np.random.default_rng(5))
    b = sample_truncated_normal(10, 3, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_truncated_logpdf_normalized():
    x = np.linspace(-1, 1, 20001)
    p = np.exp(truncated_normal_logpdf(x))
    assert np.sum(p[:-1] + p[1:]) * 0.5 * (x[1] - x[0]) == pytest.approx(1.0, abs=1e-6)
    assert truncated_normal_logpdf(np.array([1.5]))[0] == -np.inf


def test_trapezoid_weights():
    assert trapezoid_weights(np.array([0.0, 0.5, 1.0])).tolist() == [0.25, 0.5, 0.25]


def test_table_round_trip(basis):
    b = KLBasis.from_table(basis.to_table())
    for name in ("eigenvalues", "functions", "weights"):
        assert np.array_equal(getattr(b, name), getattr(basis, name))
    assert (b.mean, b.trace) == (basis.mean, basis.trace)


def test_config_validation():
    for args in ((1.0, -0.1, 1.0, 2), (1.0, 0.5, 0.0, 2), (1.0, 0.5, 1.0, 0)):
        with pytest.raises(ValueError):
            FieldConfig(*args)
