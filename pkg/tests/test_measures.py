import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exclusion_lab.errors import CapacityError, ValidationError
from exclusion_lab.measures import (
    ProductMeasure, TransportCoefficients, diffusivity, diffusivity_via_covariance, expectation,
    hat_polynomial, hat_prime, log_density_ratio, mobility, product_vector, relative_entropy_general,
    relative_entropy_products, relative_entropy_via_reference, sample,
)
from exclusion_lab.model import Configuration, CylinderFunction, all_configurations, paper_example, ssep

eta = CylinderFunction.occupation
THREE = CylinderFunction({(): 1.0, (-1,): 1.0, (2,): 1.0})
GRID = np.round(np.arange(0.05, 0.951, 0.05), 2)


def test_expectation_of_pair_homogeneous():
    mu = ProductMeasure.homogeneous(8, 0.5)
    assert expectation(eta(0) * eta(1), mu, 3, 0.5, 0.5) == pytest.approx(0.25)


def test_expectation_of_pair_inhomogeneous():
    g = np.full(7, 0.5)
    g[2], g[3] = 0.2, 0.8
    assert expectation(eta(0) * eta(1), ProductMeasure(g), 3, 0.5, 0.5) == pytest.approx(0.16)


def test_expectation_of_three_term_rate():
    th = 0.3
    mu = ProductMeasure.homogeneous(10, th)
    assert expectation(THREE, mu, 4, th, th) == pytest.approx(1 + 2 * th)


def test_expectation_linear_and_multiplicative():
    rng = np.random.default_rng(1)
    mu = ProductMeasure(rng.uniform(0.1, 0.9, 11))
    f, g = eta(0) * eta(1), eta(3) + 2.0
    lhs = expectation(f * 3.0 + g, mu, 4, 0.3, 0.6)
    assert lhs == pytest.approx(3 * expectation(f, mu, 4, 0.3, 0.6) + expectation(g, mu, 4, 0.3, 0.6))
    assert expectation(f * g, mu, 4, 0.3, 0.6) == pytest.approx(
        expectation(f, mu, 4, 0.3, 0.6) * expectation(g, mu, 4, 0.3, 0.6))


@pytest.mark.parametrize("f, value, slope", [
    (eta(0) * eta(1), lambda t: t * t, lambda t: 2 * t),
    (THREE, lambda t: 1 + 2 * t, lambda t: 2.0),
    (CylinderFunction.constant(5.0), lambda t: 5.0, lambda t: 0.0),
])
def test_hat_polynomial(f, value, slope):
    for th in (0.1, 0.45, 0.8):
        assert hat_polynomial(f, th) == pytest.approx(value(th))
        assert hat_prime(f, th) == pytest.approx(slope(th))


def test_transport_of_presets():
    assert np.allclose(diffusivity(ssep(), GRID), 1.0)
    assert np.allclose(diffusivity(paper_example(), GRID), 1 + 2 * GRID)
    assert np.allclose(mobility(ssep(), GRID), GRID * (1 - GRID))


@pytest.mark.parametrize("th, expected", [(0.5, 2.0), (0.25, 1.5)])
def test_covariance_diffusivity_three_term(th, expected):
    assert diffusivity_via_covariance(paper_example(), th) == pytest.approx(expected, abs=1e-12)


def test_covariance_diffusivity_ssep():
    for th in (0.1, 0.5, 0.9):
        assert diffusivity_via_covariance(ssep(), th) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("model", [ssep(), paper_example()])
def test_einstein_and_covariance_identities(model):
    tc = TransportCoefficients.from_model(model)
    assert np.max(np.abs(tc.einstein_residual(GRID))) <= 1e-12
    for th in GRID:
        assert abs(diffusivity_via_covariance(model, th) - tc.D(th)) <= 1e-10


def test_kirchhoff_transform_integrates_D():
    tc = TransportCoefficients.from_model(paper_example())
    assert tc.kirchhoff(0.7) - tc.kirchhoff(0.2) == pytest.approx((0.7 + 0.49) - (0.2 + 0.04))


# relative entropy


def test_entropy_of_equal_products_is_zero():
    mu = ProductMeasure(np.linspace(0.2, 0.7, 6))
    assert relative_entropy_products(mu, mu) == 0.0
    assert relative_entropy_general(mu.probabilities(), mu) == pytest.approx(0.0, abs=1e-15)


def test_entropy_closed_form_per_site():
    n = 9
    val = relative_entropy_products(ProductMeasure.homogeneous(n + 1, 0.5), ProductMeasure.homogeneous(n + 1, 0.25))
    assert val == pytest.approx(n * (0.5 * math.log(2) + 0.5 * math.log(2 / 3)))
    assert val / n == pytest.approx(0.143841, abs=1e-6)


def test_entropy_of_point_mass():
    N, th = 7, 0.3
    p = np.zeros(2 ** (N - 1))
    p[0] = 1.0
    val = relative_entropy_general(p, ProductMeasure.homogeneous(N, th))
    assert val == pytest.approx(-(N - 1) * math.log(1 - th), rel=1e-13)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 10), seed=st.integers(0, 2**32 - 1))
def test_entropy_paths_agree(n, seed):
    rng = np.random.default_rng(seed)
    mu, pi = ProductMeasure(rng.uniform(0.02, 0.98, n)), ProductMeasure(rng.uniform(0.02, 0.98, n))
    a = relative_entropy_products(mu, pi)
    b = relative_entropy_general(mu.probabilities(), pi)
    assert a >= 0
    assert abs(a - b) <= 1e-12 * max(1.0, a)


def test_entropy_keeps_relative_accuracy_near_equality():
    g = np.full(9, 0.4)
    mu, pi = ProductMeasure(g), ProductMeasure(g + 1e-7)
    exact = 9 * 1e-14 / (2 * 0.4 * 0.6)
    assert relative_entropy_products(mu, pi) == pytest.approx(exact, rel=1e-6)
    assert relative_entropy_general(mu.probabilities(), pi) == pytest.approx(exact, rel=1e-6)


def test_entropy_via_reference_is_reference_free():
    rng = np.random.default_rng(4)
    mu = ProductMeasure(rng.uniform(0.1, 0.9, 6))
    p = rng.dirichlet(np.ones(64))
    base = relative_entropy_general(p, mu)
    for th in (0.2, 0.5, 0.8):
        assert relative_entropy_via_reference(p, mu, th) == pytest.approx(base, abs=1e-12)


def test_entropy_input_checks():
    mu = ProductMeasure.homogeneous(4, 0.5)
    with pytest.raises(ValidationError):
        relative_entropy_general(np.full(8, 0.2), mu)
    with pytest.raises(ValidationError):
        relative_entropy_general(np.full(4, 0.25), mu)
    with pytest.raises(CapacityError):
        relative_entropy_general(np.zeros(2), ProductMeasure.homogeneous(23, 0.5))


def test_log_density_ratio_flat_and_single_site():
    mu = ProductMeasure.homogeneous(6, 0.4)
    for occ in all_configurations(5):
        assert log_density_ratio(mu, 0.4, occ) == pytest.approx(0.0, abs=1e-15)
    one = ProductMeasure(np.array([0.8]))
    assert log_density_ratio(one, 0.5, np.array([1], dtype=np.uint8)) == pytest.approx(math.log(1.6))
    assert log_density_ratio(one, 0.5, np.array([1], dtype=np.uint8)) == pytest.approx(0.4700, abs=1e-4)


def test_product_vector_matches_measure():
    g = np.array([0.1, 0.6, 0.3])
    assert np.allclose(product_vector(g), ProductMeasure(g).probabilities())
    assert product_vector(g).sum() == pytest.approx(1.0)


# sampling


def test_sample_near_full_occupation():
    gamma = np.full(4, 1 - 1e-15)
    mu = ProductMeasure(gamma)
    rng = np.random.default_rng(0)
    draws = np.array([sample(mu, rng).occ for _ in range(2000)])
    assert draws.all()


def test_sample_mean_within_four_sigma():
    g = np.array([0.1, 0.5, 0.9])
    rng = np.random.default_rng(7)
    R = 100_000
    draws = np.array([sample(ProductMeasure(g), rng).occ for _ in range(R)], dtype=float)
    sigma = np.sqrt(g * (1 - g) / R)
    assert np.all(np.abs(draws.mean(axis=0) - g) <= 4 * sigma)


def test_sample_replays_with_seed():
    mu = ProductMeasure(np.linspace(0.1, 0.9, 20))
    a = sample(mu, np.random.default_rng(11))
    b = sample(mu, np.random.default_rng(11))
    assert a == b and isinstance(a, Configuration)


def test_product_measure_rejects_boundary_values():
    with pytest.raises(ValidationError):
        ProductMeasure(np.array([0.0, 0.5]))
