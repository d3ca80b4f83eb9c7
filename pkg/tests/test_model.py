import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exclusion_lab.errors import ValidationError
from exclusion_lab.measures import hat_polynomial
from exclusion_lab.model import (
    Configuration, CylinderFunction, DriveSchedule, GradientDecomposition, GradientTerm, RateModel,
    all_configurations, apply_move, bond_rate, boundary_rate, bulk_rate, evaluate_extended,
    gradient_residual, logistic, logit, paper_example, preset, rate_model_from_dict,
    rate_model_to_dict, ssep, verify_gradient,
)

eta = CylinderFunction.occupation


def three_term_rate():
    return CylinderFunction({(): 1.0, (-1,): 1.0, (2,): 1.0})


def decomposition(*pairs):
    return GradientDecomposition(tuple(GradientTerm(dict(mu), h) for mu, h in pairs))


# evaluate_extended


def test_extended_product_with_empty_factor_vanishes():
    conf = Configuration.from_sites(10, [3])
    assert evaluate_extended(eta(0) * eta(1), conf, 3, 0.3, 0.7) == 0.0


def test_extended_left_reservoir_substitution():
    conf = Configuration.empty(10)
    assert evaluate_extended(eta(0), conf, 0, 0.3, 0.7) == pytest.approx(0.3)


def test_extended_mixed_window():
    conf = Configuration.empty(10)
    assert evaluate_extended(three_term_rate(), conf, 1, 0.3, 0.9) == pytest.approx(1.3)


def test_extended_right_reservoir_substitution():
    conf = Configuration.empty(10)
    assert evaluate_extended(eta(1), conf, 9, 0.3, 0.9) == pytest.approx(0.9)


def test_extended_average_matches_hat_polynomial():
    # averaging over i.i.d. Bernoulli(theta) sites with reservoirs at theta gives hat f(theta)
    f = three_term_rate() * eta(1) + eta(0) * eta(1) * 2.0
    N, j, th = 5, 1, 0.37
    total = 0.0
    for occ in all_configurations(N - 1):
        w = np.prod(np.where(occ == 1, th, 1 - th))
        total += w * evaluate_extended(f, Configuration(N, occ), j, th, th)
    assert total == pytest.approx(hat_polynomial(f, th), abs=1e-13)


# rates


def test_ssep_bulk_rate_is_one():
    model, drive = ssep(), DriveSchedule.constant(0.3, 0.6)
    conf = Configuration.from_sites(8, [1, 4, 5])
    assert all(bulk_rate(model, drive, 0.0, j, conf) == 1.0 for j in range(1, 7))


def test_bulk_tilt_factor():
    drive = DriveSchedule.constant(0.5, field=lambda t, x: 1.0)
    conf = Configuration.from_sites(100, [10])
    assert bulk_rate(ssep(), drive, 0.0, 10, conf) == pytest.approx(math.exp(1 / 200), rel=1e-14)
    assert bulk_rate(ssep(), drive, 0.0, 10, conf) == pytest.approx(1.0050125, abs=1e-7)


def test_bulk_rate_reads_reservoir():
    model = RateModel(three_term_rate(), paper_example().decomposition)
    drive = DriveSchedule.constant(0.3, 0.5)
    assert bulk_rate(model, drive, 0.0, 1, Configuration.empty(10)) == pytest.approx(1.3)


@pytest.mark.parametrize("occ1, expected", [(0, 0.3), (1, 0.7)])
def test_left_boundary_rate(occ1, expected):
    conf = Configuration.from_sites(10, [1] if occ1 else [])
    assert boundary_rate(ssep(), DriveSchedule.constant(0.3, 0.5), 0.0, "left", conf) == pytest.approx(expected)


def test_right_boundary_rate_with_field():
    drive = DriveSchedule.constant(0.3, 0.5, field=lambda t, x: 2.0)
    r = boundary_rate(ssep(), drive, 0.0, "right", Configuration.empty(100))
    assert r == pytest.approx(0.5 * math.exp(-1 / 100), rel=1e-14)
    assert r == pytest.approx(0.495025, abs=1e-6)


def test_reservoirs_are_re_read_in_time():
    drive = DriveSchedule.from_alpha(lambda t: 0.2 + 0.5 * t)
    conf = Configuration.empty(6)
    assert boundary_rate(ssep(), drive, 0.0, "left", conf) == pytest.approx(0.2)
    assert boundary_rate(ssep(), drive, 1.0, "left", conf) == pytest.approx(0.7)


def test_logistic_is_inverse_of_logit():
    th = np.linspace(0.01, 0.99, 17)
    assert np.allclose(logistic(logit(th)), th, atol=1e-15)
    assert DriveSchedule.constant(0.25).alpha0(0.0) == pytest.approx(0.25)


@settings(max_examples=60, deadline=None)
@given(occ=st.lists(st.integers(0, 1), min_size=7, max_size=7), a0=st.floats(0.01, 0.99),
       a1=st.floats(0.01, 0.99), E=st.floats(-3, 3), t=st.floats(0, 2))
def test_all_rates_positive(occ, a0, a1, E, t):
    N = 8
    conf = Configuration(N, np.array(occ, dtype=np.uint8))
    drive = DriveSchedule.constant(a0, a1, field=lambda s, x: E)
    for model in (ssep(), paper_example()):
        assert all(bond_rate(model, drive, t, b, conf) > 0 for b in range(N))


# moves


def test_exchange_of_equal_sites_is_identity():
    conf = Configuration.from_sites(8, [2, 3])
    assert apply_move(conf, 2) == conf


def test_flip_left_fills_site_one():
    conf = Configuration.from_sites(8, [4])
    new = apply_move(conf, 0)
    assert new[1] == 1 and new[4] == 1 and new.n_particles == 2


@settings(max_examples=60, deadline=None)
@given(occ=st.lists(st.integers(0, 1), min_size=9, max_size=9), bond=st.integers(0, 9))
def test_moves_are_involutions(occ, bond):
    conf = Configuration(10, np.array(occ, dtype=np.uint8))
    assert apply_move(apply_move(conf, bond), bond) == conf
    moved = apply_move(conf, bond)
    if 0 < bond < 9:
        assert moved.n_particles == conf.n_particles
    else:
        assert abs(moved.n_particles - conf.n_particles) == 1


def test_configuration_index_matches_enumeration():
    table = all_configurations(5)
    for key in (0, 3, 17, 31):
        assert Configuration(6, table[key]).index() == key


# gradient identity


def test_ssep_gradient_holds():
    model = RateModel(CylinderFunction.constant(1.0), decomposition(({0: 1.0, -1: -1.0}, eta(0))))
    assert verify_gradient(model)


def test_three_term_preset_gradient_holds():
    assert gradient_residual(paper_example()) == 0
    assert verify_gradient(preset("paper-example"))


def test_swapped_partner_sites_fail():
    # partner sites exchanged between the first two terms: the identity breaks
    model = RateModel(three_term_rate(), decomposition(
        ({0: 1.0, 2: -1.0}, eta(-1) * eta(0)),
        ({0: 1.0, -1: -1.0}, eta(0) * eta(2)),
        ({0: 1.0, -1: -1.0}, eta(0)),
    ))
    assert not verify_gradient(model)


def test_wrong_third_partner_fails():
    good = paper_example().decomposition.terms
    bad = decomposition((good[0].mu, good[0].h), (good[1].mu, good[1].h), ({0: 1.0, 1: -1.0}, eta(0)))
    model = RateModel(three_term_rate(), bad)
    assert not verify_gradient(model)
    assert gradient_residual(model) != 0


def test_residual_is_exact_rational():
    assert isinstance(gradient_residual(ssep()), Fraction)


def test_model_dict_round_trip():
    for model in (ssep(), paper_example()):
        back = rate_model_from_dict(rate_model_to_dict(model))
        assert back.c == model.c
        assert verify_gradient(back)


def test_unknown_preset_and_keys():
    with pytest.raises(ValidationError):
        preset("nope")
    with pytest.raises(ValidationError, match="unknown model keys"):
        rate_model_from_dict({"preset": "ssep", "colour": 1})
    with pytest.raises(ValidationError, match="decomposition"):
        rate_model_from_dict({"rate": [{"sites": [], "coef": 1.0}]})
