import math

import numpy as np
import pytest

from exclusion_lab import master
from exclusion_lab.errors import CapacityError
from exclusion_lab.measures import ProductMeasure, product_vector
from exclusion_lab.model import (
    Configuration, DriveSchedule, all_configurations, apply_move, bond_rate, paper_example, ssep,
)

PRESETS = [ssep(), paper_example()]


@pytest.mark.parametrize("model", PRESETS)
def test_generator_matches_scalar_rates(model):
    N = 5
    drive = DriveSchedule.from_alpha(lambda t: 0.3 + 0.1 * t, lambda t: 0.6, field=lambda t, x: 0.7 * x - 0.2)
    Q = master.build_generator(model, drive, 0.4, N).toarray()
    table = all_configurations(N - 1)
    expect = np.zeros_like(Q)
    for key, occ in enumerate(table):
        conf = Configuration(N, occ)
        for b in range(N):
            new = apply_move(conf, b)
            if new.index() != key:
                expect[key, new.index()] += bond_rate(model, drive, 0.4, b, conf)
    np.fill_diagonal(expect, -expect.sum(axis=1))
    assert np.allclose(Q, expect, atol=1e-14, rtol=0)


@pytest.mark.parametrize("model", PRESETS)
def test_generator_rows_sum_to_zero(model):
    Q = master.build_generator(model, DriveSchedule.constant(0.2, 0.9, field=lambda t, x: 1.0), 0.0, 7)
    dense = Q.toarray()
    off = dense - np.diag(np.diag(dense))
    assert np.all(off >= 0)
    assert np.max(np.abs(dense.sum(axis=1))) <= 1e-13


def test_two_state_stationary():
    p = master.stationary_state(ssep(), DriveSchedule.constant(0.2, 0.7), 0.0, 2)
    assert np.allclose(p, [1 - 0.45, 0.45], atol=1e-14)


@pytest.mark.parametrize("model", PRESETS)
@pytest.mark.parametrize("N", [2, 4, 6])
def test_equilibrium_is_bernoulli_and_reversible(model, N):
    drive = DriveSchedule.constant(0.35)
    pi = product_vector(np.full(N - 1, 0.35))
    assert master.detailed_balance_residual(model, drive, 0.0, N, pi) <= 1e-12
    assert np.max(np.abs(master.stationary_state(model, drive, 0.0, N) - pi)) <= 1e-12


def test_stationary_vector_is_fixed_point():
    model, drive = paper_example(), DriveSchedule.constant(0.2, 0.8)
    p = master.stationary_state(model, drive, 0.0, 6)
    traj = master.evolve_forward(p, model, drive, 30.0, 1.0, 0.25)
    assert np.max(np.abs(traj.probabilities - p)) <= 1e-9


def test_two_state_transient_closed_form():
    # birth a0 + a1, death 2 - a0 - a1 with time-dependent a0
    a1, theta = 0.6, 3.0
    drive = DriveSchedule.from_alpha(lambda t: 0.2 + 0.3 * t, lambda t: 0.6)
    traj = master.evolve_forward(np.array([1.0, 0.0]), ssep(), drive, theta, 1.0, 0.5)
    # the ODE q' = theta (a0(t) + a1 - 2 q) integrated exactly
    from scipy.integrate import solve_ivp
    sol = solve_ivp(lambda t, q: theta * (0.2 + 0.3 * t + a1 - 2 * q), (0, 1), [0.0], t_eval=[0.5, 1.0],
                    rtol=1e-12, atol=1e-14)
    assert np.allclose(traj.probabilities[1:, 1], sol.y[0], atol=1e-9)


def test_mass_and_positivity_preserved():
    drive = DriveSchedule.from_alpha(lambda t: 0.5 + 0.4 * math.sin(6 * t), lambda t: 0.3,
                                     field=lambda t, x: 2.0 * math.cos(t))
    p0 = ProductMeasure(np.linspace(0.2, 0.8, 7)).probabilities()
    traj = master.evolve_forward(p0, paper_example(), drive, 40.0, 1.0, 0.2)
    assert np.all(traj.probabilities >= 0)
    assert np.allclose(traj.probabilities.sum(axis=1), 1.0, atol=1e-12)
    assert traj.times[-1] == pytest.approx(1.0)


def test_occupation_of_product_vector():
    g = np.array([0.1, 0.4, 0.8, 0.3])
    traj = master.Trajectory(np.array([0.0]), product_vector(g)[None, :])
    assert np.allclose(traj.occupation(5)[0], g)


def test_entropy_zero_at_equilibrium():
    N, th = 7, 0.4
    p0 = product_vector(np.full(N - 1, th))
    ent = master.entropy_trajectory(p0, ssep(), DriveSchedule.constant(th, epsilon=0.5), 50.0,
                                    lambda t: np.full(N - 1, th), 1.0, 0.25)
    assert np.max(ent.H) <= 1e-9


def test_entropy_to_reversible_state_decreases():
    N, th = 7, 0.4
    p0 = product_vector(np.linspace(0.15, 0.75, N - 1))
    ent = master.entropy_trajectory(p0, paper_example(), DriveSchedule.constant(th), 2.0,
                                    lambda t: np.full(N - 1, th), 1.0, 0.1)
    assert np.all(np.diff(ent.H) < 0)
    assert ent.H[0] > 0
    assert np.allclose(ent.H_norm, ent.H / (N - 1 + 1))


def test_capacity_limit():
    with pytest.raises(CapacityError):
        master.build_generator(ssep(), DriveSchedule.constant(0.5), 0.0, 16)
