import math

import numpy as np
import pytest

from exclusion_lab import kmc
from exclusion_lab.errors import ValidationError
from exclusion_lab.measures import ProductMeasure
from exclusion_lab.model import Configuration, DriveSchedule, paper_example, ssep


def occupation_observer(t, occ):
    return occ.astype(float)


def test_block_density_examples():
    conf = Configuration.from_sites(20, [4, 6])
    assert kmc.block_density(conf, 5, 1) == pytest.approx(2 / 3)
    assert kmc.block_density(conf, 6, 0) == 1.0
    full = Configuration(50, np.ones(49, dtype=np.uint8))
    assert kmc.block_density(full, 1, 2) == pytest.approx(3 / 5)


def test_block_profile_matches_scalar():
    rng = np.random.default_rng(3)
    occ = rng.integers(0, 2, 30).astype(np.uint8)
    prof = kmc.block_density_profile(occ, 3)
    assert np.allclose(prof, [kmc.block_density(occ, j, 3) for j in range(1, 31)])


def test_no_checkpoints_returns_initial_state_only():
    init = Configuration.from_sites(10, [2, 5])
    res = kmc.run(ssep(), DriveSchedule.constant(0.5), 10, 100.0, init, [], {"occ": occupation_observer}, rng=1)
    assert res.n_events == 0 and res.n_proposals == 0
    assert list(res.times) == [0.0]
    assert np.array_equal(res.snapshots[0], init.occ)


@pytest.mark.parametrize("method", ["tree", "uniform"])
def test_single_site_time_average(method):
    # one site, birth rate a0 + a1, death rate 2 - a0 - a1: mean occupation (a0 + a1) / 2
    drive = DriveSchedule.constant(0.2, 0.8)
    cks = np.arange(1, 4001) * 0.5
    res = kmc.run(ssep(), drive, 2, 1.0, Configuration.empty(2), cks, rng=5, method=method)
    x = res.snapshots[1:, 0].astype(float)
    # samples are 0.5 apart with correlation exp(-2 * 0.5)
    rho = math.exp(-1.0)
    sigma = math.sqrt(0.25 / x.size * (1 + rho) / (1 - rho))
    assert abs(x.mean() - 0.5) <= 4 * sigma


@pytest.mark.parametrize("model", [ssep(), paper_example()])
def test_equilibrium_density_preserved(model):
    th, N = 0.35, 12
    spec = kmc.EnsembleSpec(model, DriveSchedule.constant(th), N, 50.0, lambda x: th, (0.5, 1.0),
                            {"occ": occupation_observer}, "tree")
    res = kmc.run_ensemble(spec, 400, base_seed=9, workers=1)
    total = res.mean["occ"][-1].mean()
    sigma = math.sqrt(th * (1 - th) / (400 * (N - 1)))
    assert abs(total - th) <= 4 * sigma


def test_selectors_agree_in_law():
    drive = DriveSchedule.from_alpha(lambda t: 0.3 + 0.4 * t, lambda t: 0.7 - 0.2 * t)
    out = {}
    for method in ("tree", "uniform"):
        spec = kmc.EnsembleSpec(paper_example(), drive, 8, 20.0, lambda x: 0.5, (0.5,),
                                {"occ": occupation_observer}, method)
        out[method] = kmc.run_ensemble(spec, 600, base_seed=2 if method == "tree" else 3, workers=1)
    d = out["tree"].mean["occ"][-1] - out["uniform"].mean["occ"][-1]
    s = np.hypot(out["tree"].stderr["occ"][-1], out["uniform"].stderr["occ"][-1])
    assert np.all(np.abs(d) <= 4.5 * s)


def test_debug_mode_checks_particle_number():
    drive = DriveSchedule.constant(0.3, 0.6, field=lambda t, x: 1.5)
    res = kmc.run(paper_example(), drive, 16, 200.0, Configuration.empty(16), [0.5, 1.0], rng=4, debug=True)
    assert res.n_events > 0
    assert res.n_proposals >= res.n_events


def test_fast_drive_never_exceeds_bound():
    drive = DriveSchedule(lambda t: 4.0 * math.sin(200.0 * t), lambda t: -3.0 * math.cos(300.0 * t),
                          field=lambda t, x: 2.0 * math.sin(50.0 * t + x))
    for method in ("tree", "uniform"):
        res = kmc.run(paper_example(), drive, 10, 500.0, Configuration.empty(10), [0.2], rng=8,
                      method=method, debug=True)
        assert res.n_events > 0


def test_ensemble_is_deterministic_and_worker_independent():
    spec = kmc.EnsembleSpec(ssep(), DriveSchedule.from_alpha(lambda t: 0.2 + 0.3 * t), 10, 30.0,
                            lambda x: 0.5, (0.25, 0.5), {"occ": occupation_observer}, "uniform")
    a = kmc.run_ensemble(spec, 16, base_seed=42, workers=1)
    b = kmc.run_ensemble(spec, 16, base_seed=42, workers=4)
    assert np.array_equal(a.mean["occ"], b.mean["occ"])
    assert np.array_equal(a.stderr["occ"], b.stderr["occ"])
    assert a.seeds == b.seeds


def test_deterministic_observer_has_zero_error():
    spec = kmc.EnsembleSpec(ssep(), DriveSchedule.constant(0.5), 6, 10.0, lambda x: 0.5, (0.1,),
                            {"one": lambda t, occ: 1.0})
    res = kmc.run_ensemble(spec, 5, base_seed=0, workers=1)
    assert np.all(res.stderr["one"] == 0.0)


def test_initial_state_from_product_measure():
    spec = kmc.EnsembleSpec(ssep(), DriveSchedule.constant(0.5), 6, 10.0,
                            ProductMeasure(np.full(5, 1 - 1e-15)), (0.0,), {"occ": occupation_observer})
    res = kmc.run_ensemble(spec, 3, base_seed=0, workers=1)
    assert np.all(res.mean["occ"][0] == 1.0)


def test_input_validation():
    init = Configuration.empty(6)
    with pytest.raises(ValidationError):
        kmc.run(ssep(), DriveSchedule.constant(0.5), 7, 1.0, init, [1.0])
    with pytest.raises(ValidationError):
        kmc.run(ssep(), DriveSchedule.constant(0.5), 6, 1.0, init, [1.0, 0.5])
    with pytest.raises(ValidationError):
        kmc.run(ssep(), DriveSchedule.constant(0.5), 6, 1.0, init, [1.0], method="bogus")
