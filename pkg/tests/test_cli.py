import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exclusion_lab import config as cfgmod
from exclusion_lab.cli import dispatch
from exclusion_lab.errors import ConfigError


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("EXCLUSION_LAB_OUT", str(tmp_path))
    return tmp_path


# config


EXAMPLE = """
model: {preset: paper-example}
drive: {alpha0: "0.4 + 0.1*sin(t)", epsilon: 0.3, ell: 2.5}
lattice: {N: 8}
solver: {M: 128, T: 0.5, report: 0.25}
experiment: {R: 10, seed: 7, Ns: [16, 32]}
"""


def test_config_round_trip():
    cfg = cfgmod.parse(EXAMPLE)
    assert cfgmod.parse(cfg.to_yaml()) == cfg
    assert cfg.solver["newton_tol"] == 1e-11 and cfg.solver["startup_steps"] == 2


@settings(max_examples=40, deadline=None)
@given(N=st.integers(2, 600), T=st.floats(0.01, 100, allow_nan=False), R=st.integers(2, 10**6),
       a=st.floats(0.01, 0.99), ell=st.floats(1e-3, 1e4))
def test_config_round_trip_property(N, T, R, a, ell):
    cfg = cfgmod.from_dict({"drive": {"alpha0": a, "ell": ell}, "lattice": {"N": N},
                            "solver": {"T": T}, "experiment": {"R": R}})
    assert cfgmod.parse(cfg.to_yaml()) == cfg


def test_unknown_keys_are_listed():
    with pytest.raises(ConfigError, match=r"\['colour', 'size'\]"):
        cfgmod.parse("lattice: {N: 4, size: 2, colour: red}")
    with pytest.raises(ConfigError, match="unknown config sections"):
        cfgmod.parse("plots: {}")


def test_missing_key_is_named():
    cfg = cfgmod.parse("solver: {T: 1}")
    with pytest.raises(ConfigError, match="lattice.N"):
        cfg.require("lattice.N")
    with pytest.raises(ConfigError, match="drive.alpha0"):
        cfg.drive_schedule()


def test_drive_expressions():
    drive = cfgmod.parse(EXAMPLE).drive_schedule()
    assert drive.alpha0(1.0) == pytest.approx(0.4 + 0.1 * np.sin(1.0))
    assert drive.alpha1(1.0) == pytest.approx(drive.alpha0(1.0))
    assert drive.ell == 2.5 and drive.epsilon == 0.3
    field = cfgmod.drive_from_dict({"alpha0": 0.3, "alpha1": 0.6, "field": "2*x - t"})
    assert field.E(1.0, 0.25) == pytest.approx(-0.5)
    lam = cfgmod.drive_from_dict({"lambda0": "0.5*t"})
    assert lam.lambda0(2.0) == pytest.approx(1.0)


@pytest.mark.parametrize("src", ["__import__('os')", "t.real", "[t]", "open(t)", "lambda: 1", "u + 1", "'a'"])
def test_expression_whitelist(src):
    with pytest.raises(ConfigError):
        cfgmod.compile_expression(src)


def test_manifest_is_accepted_as_config(out):
    assert dispatch(["exact", "stationary", "--N", "4", "--alpha0", "0.3", "--alpha1", "0.6"]) == 0
    cfg = cfgmod.load(out / "exact_stationary_manifest.json")
    assert cfg.lattice["N"] == 4 and cfg.drive["alpha1"] == 0.6


# commands


def test_transport_ssep_row(out, capsys):
    assert dispatch(["transport", "--model", "ssep"]) == 0
    rows = {float(r["theta"]): r for r in read_rows(out / "transport.csv")}
    assert float(rows[0.5]["D"]) == 1.0 and float(rows[0.5]["chi"]) == 0.25
    assert list(read_rows(out / "transport.csv")[0]) == ["theta", "D", "chi", "D_cov", "einstein_residual"]
    assert "0.5,1,0.25" in capsys.readouterr().out


def test_check_gradient_ok(capsys):
    assert dispatch(["check-gradient", "--model", "paper-example"]) == 0
    assert capsys.readouterr().out.strip() == "OK"


def test_check_gradient_reports_failure(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("""
rate: [{sites: [], coef: 1.0}, {sites: [-1], coef: 1.0}, {sites: [2], coef: 1.0}]
decomposition:
  - {h: [{sites: [-1, 0], coef: 1.0}], mu: [[0, 1.0], [2, -1.0]]}
  - {h: [{sites: [0, 2], coef: 1.0}], mu: [[0, 1.0], [-1, -1.0]]}
  - {h: [{sites: [0], coef: 1.0}], mu: [[0, 1.0], [-1, -1.0]]}
""")
    assert dispatch(["check-gradient", "--model", str(bad)]) == 1
    assert "FAILED" in capsys.readouterr().out


def test_pde_correction_closed_form(out, capsys):
    assert dispatch(["pde", "correction", "--D-const", "2", "--alpha-prime", "0.1"]) == 0
    assert "v(0.5) = -0.00625" in capsys.readouterr().out
    rows = read_rows(out / "correction.csv")
    mid = [r for r in rows if float(r["x"]) == 0.5][0]
    assert float(mid["value"]) == pytest.approx(-0.00625, abs=1e-12)


def test_pde_run_writes_profiles(out):
    assert dispatch(["pde", "run", "--alpha0", "0.3", "--alpha1", "0.7", "--T", "0.2", "--M", "32"]) == 0
    rows = read_rows(out / "profiles.csv")
    assert list(rows[0]) == ["t", "x", "value"]
    assert len(rows) == 3 * 33
    manifest = json.loads((out / "profiles_manifest.json").read_text())
    assert manifest["config"]["solver"]["M"] == 32 and len(manifest["config_sha256"]) == 64


def test_simulate_is_reproducible_from_manifest(out):
    args = ["simulate", "--N", "8", "--alpha0", "0.3", "--alpha1", "0.7-0.1*t", "--T", "0.2", "--R", "12",
            "--seed", "5"]
    assert dispatch(args) == 0
    first = (out / "ensemble.csv").read_bytes()
    rows = read_rows(out / "ensemble.csv")
    assert list(rows[0]) == ["t", "j", "mean", "stderr", "n"]
    assert dispatch(["simulate", "--config", str(out / "ensemble_manifest.json")]) == 0
    assert (out / "ensemble.csv").read_bytes() == first


def test_exact_entropy_schema(out):
    assert dispatch(["exact", "entropy", "--N", "5", "--alpha0", "0.4+0.05*t", "--epsilon", "0.3",
                     "--ell", "2", "--T", "0.2"]) == 0
    rows = read_rows(out / "entropy.csv")
    assert list(rows[0]) == ["t", "H", "H_norm"] and float(rows[0]["H"]) == 0.0


def test_experiment_writes_manifest(out):
    assert dispatch(["experiment", "correction", "--Ns", "16", "--R", "4", "--alpha0", "0.4+0.1*t",
                     "--T", "0.02"]) == 0
    manifest = json.loads((out / "correction_manifest.json").read_text())
    assert manifest["config"]["experiment"]["Ns"] == [16]
    assert len(manifest["seeds"]) == 4 and "summary" in manifest


def test_validation_errors_exit_one(out):
    assert dispatch(["pde", "run"]) == 1
    assert dispatch(["transport", "--set", "drive.colour=1"]) == 1
    assert dispatch(["transport", "--model", "nope"]) == 1
    assert dispatch(["bogus"]) == 1
    assert dispatch(["exact", "evolve", "--N", "20", "--alpha0", "0.4"]) == 1


def test_solver_failure_exits_two(out, monkeypatch):
    from exclusion_lab import pde
    from exclusion_lab.errors import NewtonError

    def boom(*a, **k):
        raise NewtonError("forced")

    monkeypatch.setattr(pde, "stationary_profile", boom)
    assert dispatch(["pde", "stationary", "--alpha0", "0.3"]) == 2
