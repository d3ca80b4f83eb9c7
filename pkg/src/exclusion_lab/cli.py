"""Command-line entry point: ``exclusion-lab <command> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 solver or
runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from . import experiments, kmc, master, pde
from .errors import SolverError, ValidationError
from .measures import ProductMeasure, TransportCoefficients, diffusivity_via_covariance
from .model import gradient_residual, rate_model_from_dict
from .reporting import output_dir, write_csv, write_manifest

log = logging.getLogger("exclusion_lab")

DEFAULT_THETAS = tuple(round(0.05 * k, 2) for k in range(1, 20))


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


# flag -> config key
OVERRIDES = {
    "N": "lattice.N", "T": "solver.T", "M": "solver.M", "dt": "solver.dt", "report": "solver.report",
    "alpha0": "drive.alpha0", "alpha1": "drive.alpha1", "ell": "drive.ell", "epsilon": "drive.epsilon",
    "R": "experiment.R", "Ns": "experiment.Ns", "seed": "experiment.seed", "method": "lattice.method",
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="YAML file with model/drive/lattice/solver/experiment sections")
    g.add_argument("--seed", type=_u64, help="base seed (u64)")
    g.add_argument("--out", help="output directory (default $EXCLUSION_LAB_OUT or ./out)")
    g.add_argument("--format", choices=["csv"], default="csv")
    g.add_argument("--model", help="preset name or YAML file with a model description")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value (repeatable)")
    g.add_argument("--N", type=int, help="lattice size")
    g.add_argument("--T", type=float, help="final macroscopic time")
    g.add_argument("--M", type=int, help="PDE grid intervals")
    g.add_argument("--dt", type=float, help="PDE time step")
    g.add_argument("--report", type=float, help="report spacing")
    g.add_argument("--alpha0", help="left density, number or expression in t")
    g.add_argument("--alpha1", help="right density, number or expression in t")
    g.add_argument("--ell", type=float, help="speed-up factor on top of N^2")
    g.add_argument("--epsilon", type=float, help="correction scale")
    g.add_argument("--R", type=int, help="number of replicas")
    g.add_argument("--Ns", type=_ints, help="lattice sizes, comma separated")
    g.add_argument("--method", choices=["tree", "uniform"], help="KMC bond selector")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    top = _Parser(prog="exclusion-lab", description="Boundary-driven exclusion processes.")
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("transport", parents=[common], help="D, chi, Einstein and covariance tables")
    p.add_argument("--thetas", type=_floats, default=list(DEFAULT_THETAS))

    sub.add_parser("check-gradient", parents=[common], help="verify the gradient decomposition exactly")

    pp = sub.add_parser("pde", help="macroscopic equations").add_subparsers(
        dest="action", required=True, parser_class=_Parser)
    for name in ("run", "stationary", "correction", "quasistatic", "diagnostics"):
        q = pp.add_parser(name, parents=[common])
        q.add_argument("--D-const", type=float, help="use a constant diffusivity instead of the model's")
        if name in ("stationary", "correction"):
            q.add_argument("--t", type=float, default=0.0, help="time of the profile")
        if name == "correction":
            q.add_argument("--alpha-prime", type=float, help="constant boundary-density rate (closed form)")
            q.add_argument("--alpha", type=float, default=0.5, help="boundary density used with --alpha-prime")
        if name in ("quasistatic", "diagnostics"):
            q.add_argument("--nus", type=_floats, default=[10.0, 100.0, 1000.0])
            q.add_argument("--times", type=_floats, help="report times (default: solver report grid)")

    sub.add_parser("simulate", parents=[common], help="kinetic Monte Carlo, single run or ensemble")

    ep = sub.add_parser("exact", help="master equation on small lattices").add_subparsers(
        dest="action", required=True, parser_class=_Parser)
    for name in ("evolve", "stationary", "entropy"):
        q = ep.add_parser(name, parents=[common])
        if name == "stationary":
            q.add_argument("--t", type=float, default=0.0)

    xp = sub.add_parser("experiment", help="scaling experiments").add_subparsers(
        dest="action", required=True, parser_class=_Parser)
    for name in ("hydro", "correction", "entropy"):
        xp.add_parser(name, parents=[common])
    return top


# ----------------------------------------------------------------------------
# Config assembly


def _load_model_arg(cfg: cfgmod.Config, value: str) -> None:
    path = Path(value)
    if path.suffix in (".yaml", ".yml", ".json") or path.exists():
        if not path.exists():
            raise ValidationError(f"model file {value!r} not found")
        data = yaml.safe_load(path.read_text())
        if isinstance(data, dict) and "model" in data:
            data = data["model"]
        rate_model_from_dict(data)
        cfg.model = dict(data)
    else:
        cfg.model = {"preset": value}


def assemble_config(args) -> cfgmod.Config:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.from_dict({})
    if args.model:
        _load_model_arg(cfg, args.model)
    for flag, key in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            if key.startswith("drive.alpha"):
                try:
                    value = float(value)
                except ValueError:
                    pass
            cfg.override(key, value)
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        cfg.override(key.strip(), yaml.safe_load(raw))
    # re-validate after overrides
    return cfgmod.from_dict(cfg.as_dict())


def _transport(cfg: cfgmod.Config, args) -> TransportCoefficients:
    if getattr(args, "D_const", None) is not None:
        if not args.D_const > 0:
            raise ValidationError("--D-const must be positive")
        return TransportCoefficients.constant(args.D_const)
    return TransportCoefficients.from_model(cfg.rate_model())


def _profile_expr(src):
    f = cfgmod.compile_expression(src, ("x",))
    return lambda x: np.asarray(f(np.asarray(x, dtype=float)), dtype=float) * np.ones_like(np.asarray(x, dtype=float))


def _report_times(cfg: cfgmod.Config) -> list[float]:
    t0, T, dt = float(cfg.solver["t0"]), float(cfg.require("solver.T")), float(cfg.solver["report"])
    return [float(t) for t in master.report_times(t0, T, dt)]


def _manifest(out: Path, name: str, cfg: cfgmod.Config, args, paths, seeds=(), **extra) -> None:
    record = cfg.as_dict()
    record["command"] = _command_line(args)
    write_manifest(out / f"{name}_manifest.json", record, seeds, outputs=[p.name for p in paths], **extra)


# command options that are not config values but shape the output
_COMMAND_OPTIONS = ("thetas", "D_const", "t", "alpha_prime", "alpha", "nus", "times")


def _command_line(args) -> dict:
    words = [args.command]
    if getattr(args, "action", None):
        words.append(args.action)
    opts = {k: getattr(args, k) for k in _COMMAND_OPTIONS if getattr(args, k, None) is not None}
    return {"words": words, "options": opts}


def _print_table(columns, rows, stream=None) -> None:
    stream = stream or sys.stdout
    print(",".join(columns), file=stream)
    for row in rows:
        print(",".join(f"{v:.12g}" if isinstance(v, float) else str(v) for v in row), file=stream)


# ----------------------------------------------------------------------------
# Commands


def cmd_transport(cfg, args) -> int:
    model = cfg.rate_model()
    tc = TransportCoefficients.from_model(model)
    rows = []
    for th in args.thetas:
        if not 0.0 < th < 1.0:
            raise ValidationError(f"theta {th} outside (0,1)")
        rows.append((float(th), float(tc.D(th)), float(tc.chi(th)),
                     float(diffusivity_via_covariance(model, th)), float(tc.einstein_residual(th))))
    cols = ["theta", "D", "chi", "D_cov", "einstein_residual"]
    out = output_dir(args.out)
    path = write_csv(out / "transport.csv", cols, rows)
    _manifest(out, "transport", cfg, args, [path])
    _print_table(cols, rows)
    return 0


def cmd_check_gradient(cfg, args) -> int:
    model = cfg.rate_model()
    res = gradient_residual(model)
    if res == 0:
        print("OK")
        return 0
    print(f"FAILED: gradient residual {float(res):.6g} for model '{model.name}'")
    return 1


def _write_profiles(out: Path, name: str, times, x, values) -> Path:
    rows = [(float(t), float(xi), float(v)) for t, vals in zip(times, values) for xi, v in zip(x, vals)]
    return write_csv(out / f"{name}.csv", ["t", "x", "value"], rows)


def cmd_pde(cfg, args) -> int:
    tc = _transport(cfg, args)
    M = int(cfg.solver["M"])
    out = output_dir(args.out)
    act = args.action

    if act == "correction" and args.alpha_prime is not None:
        if not 0.0 < args.alpha < 1.0:
            raise ValidationError("--alpha must lie in (0,1)")
        v = pde.solve_correction_quasistatic(tc, args.alpha, args.alpha_prime, M, args.t)
        path = _write_profiles(out, "correction", [args.t], v.x, [v.values])
        _manifest(out, "correction", cfg, args, [path], alpha=args.alpha, alpha_prime=args.alpha_prime,
                  D_const=args.D_const)
        print(f"v(0.5) = {float(v.at(0.5)):.12g}")
        return 0

    drive = cfg.drive_schedule()
    if act == "stationary":
        prof = pde.stationary_profile(tc, drive, args.t, M)
        path = _write_profiles(out, "stationary", [args.t], prof.x, [prof.values])
        _manifest(out, "stationary", cfg, args, [path])
        print(f"wrote {path}")
        return 0
    if act == "correction":
        v = pde.correction_at(tc, drive, args.t, M)
        path = _write_profiles(out, "correction", [args.t], v.x, [v.values])
        _manifest(out, "correction", cfg, args, [path])
        print(f"v(0.5) = {float(v.at(0.5)):.12g}")
        return 0

    T = float(cfg.solver["T"])
    t0 = float(cfg.solver["t0"])
    dt = cfg.solver.get("dt")
    if act == "run":
        init = cfg.lattice.get("initial")
        rho0 = _profile_expr(init) if init is not None else \
            pde.stationary_profile(tc, drive, t0, M).values
        log.info("pde run at speed ell=%g", drive.ell)
        sol = pde.solve_parabolic(tc, drive, rho0, T, M=M, dt=dt, report=float(cfg.solver["report"]), t0=t0,
                                  newton_tol=float(cfg.solver["newton_tol"]),
                                  startup_steps=int(cfg.solver["startup_steps"]))
        path = _write_profiles(out, "profiles", sol.times, sol.x, sol.values)
        _manifest(out, "profiles", cfg, args, [path], mass_defect=float(sol.mass_defect))
        print(f"wrote {path}")
        return 0

    # quasistatic / diagnostics share the family of runs
    times = args.times or _report_times(cfg)[1:]
    gamma = cfg.experiment.get("gamma")
    v0 = _profile_expr(gamma) if gamma is not None else (lambda x: x * (1.0 - x))
    rows, sols = pde.quasi_static_gap(tc, drive, v0, args.nus, times, M=M, dt=dt,
                                      startup_steps=int(cfg.solver["startup_steps"]))
    if act == "quasistatic":
        path = write_csv(out / "quasistatic.csv", ["nu", "t", "gap"], [(r.nu, r.t, r.gap) for r in rows])
        _manifest(out, "quasistatic", cfg, args, [path], nus=args.nus)
        _print_table(["nu", "t", "gap"], [(r.nu, r.t, r.gap) for r in rows])
        return 0
    rep = pde.apriori_diagnostics(tc, drive, sols, max(times))
    cols = ["nu", "t", "dev", "d1", "d2", "F", "dF", "delta"]
    path = write_csv(out / "diagnostics.csv", cols, [tuple(r[c] for c in cols) for r in rep.table])
    summary = {"plateau": rep.plateau, "slope": rep.slope, "B_fit": rep.B_fit, "F_ell": rep.F_ell,
               "delta_min": rep.delta_min, "flags": rep.flags}
    _manifest(out, "diagnostics", cfg, args, [path], summary=summary)
    print(f"plateau slope {rep.slope:.4f}, B_fit {rep.B_fit:.4g}, flags {rep.flags or 'none'}")
    return 0


def _initial_profile(cfg, drive):
    init = cfg.lattice.get("initial")
    if init is not None:
        return _profile_expr(init)
    t0 = float(cfg.solver["t0"])
    a0, a1 = drive.alphas(t0)
    return lambda x: a0 + (a1 - a0) * np.asarray(x, dtype=float)


def cmd_simulate(cfg, args) -> int:
    model, drive = cfg.rate_model(), cfg.drive_schedule()
    N = int(cfg.require("lattice.N"))
    R = int(cfg.experiment["R"])
    seed = int(cfg.experiment["seed"])
    t0 = float(cfg.solver["t0"])
    cks = tuple(_report_times(cfg))
    theta = drive.ell * N**2
    log.info("simulating N=%d with speed-up ell N^2 = %g", N, theta)
    gamma = _initial_profile(cfg, drive)
    occ = {"occ": lambda t, o: o.astype(float)}
    spec = kmc.EnsembleSpec(model, drive, N, theta, gamma, cks, occ, cfg.lattice["method"], t0)
    if R == 1:
        rng = np.random.default_rng(kmc.replica_seeds(seed, 1)[0])
        res = kmc.run(model, drive, N, theta, kmc._initial_state(spec, rng), cks, occ, rng=rng,
                      method=spec.method, t0=t0)
        mean, err, seeds = res.observations["occ"], np.full((len(cks), N - 1), np.nan), [res.seed]
    else:
        res = kmc.run_ensemble(spec, R, seed, workers=cfg.experiment.get("workers"), keep_samples=False)
        mean, err, seeds = res.mean["occ"], res.stderr["occ"], res.seeds
    rows = [(float(t), j, float(mean[k, j - 1]), float(err[k, j - 1]), R)
            for k, t in enumerate(cks) for j in range(1, N)]
    out = output_dir(args.out)
    path = write_csv(out / "ensemble.csv", ["t", "j", "mean", "stderr", "n"], rows)
    _manifest(out, "ensemble", cfg, args, [path], seeds, theta_time=theta)
    print(f"wrote {path}")
    return 0


def cmd_exact(cfg, args) -> int:
    model, drive = cfg.rate_model(), cfg.drive_schedule()
    N = int(cfg.require("lattice.N"))
    out = output_dir(args.out)
    theta = drive.ell * N**2
    x = np.arange(1, N) / N
    if args.action == "stationary":
        p = master.stationary_state(model, drive, args.t, N)
        occ = master.Trajectory(np.array([args.t]), p[None, :]).occupation(N)
        path = _write_profiles(out, "exact_stationary", [args.t], x, occ)
        _manifest(out, "exact_stationary", cfg, args, [path])
        print(f"wrote {path}")
        return 0
    T, dt = float(cfg.solver["T"]), float(cfg.solver["report"])
    t0 = float(cfg.solver["t0"])
    if args.action == "evolve":
        p0 = ProductMeasure.from_profile(N, _initial_profile(cfg, drive)).probabilities()
        log.info("evolving N=%d with speed-up ell N^2 = %g", N, theta)
        traj = master.evolve_forward(p0, model, drive, theta, T, dt, N=N, t0=t0)
        path = _write_profiles(out, "exact_profiles", traj.times, x, traj.occupation(N))
        _manifest(out, "exact_profiles", cfg, args, [path], theta_time=theta)
        print(f"wrote {path}")
        return 0
    rep = experiments.entropy_experiment(model, drive, N, T, dt)
    cols, rows = rep.tables["trajectory"]
    path = write_csv(out / "entropy.csv", cols, rows)
    _manifest(out, "entropy", cfg, args, [path], summary=rep.summary)
    _print_table(cols, rows)
    return 0


def cmd_experiment(cfg, args) -> int:
    model, drive = cfg.rate_model(), cfg.drive_schedule()
    ex = cfg.experiment
    out = output_dir(args.out)
    T = float(cfg.solver["T"])
    R, seed = int(ex["R"]), int(ex["seed"])
    cks = ex.get("checkpoints") or [T]
    method = cfg.lattice["method"]
    if args.action == "hydro":
        Ns = cfg.require("experiment.Ns")
        gamma = _profile_expr(ex["gamma"]) if ex.get("gamma") is not None \
            else _initial_profile(cfg, drive)
        rep = experiments.hydro_limit_experiment(model, drive, Ns, gamma, T, cks, R, seed, K=ex.get("K"),
                                                 method=method, workers=ex.get("workers"))
    elif args.action == "correction":
        Ns = cfg.require("experiment.Ns")
        gamma = _profile_expr(ex["gamma"]) if ex.get("gamma") is not None else None
        rep = experiments.correction_experiment(model, drive, Ns, T, R, seed, gamma=gamma, K=ex.get("K"),
                                                checkpoints=cks, C_fit=float(ex["C_fit"]), method=method,
                                                workers=ex.get("workers"))
    else:
        N = int(cfg.require("lattice.N"))
        gamma = _profile_expr(ex["gamma"]) if ex.get("gamma") is not None else None
        rep = experiments.entropy_experiment(model, drive, N, T, float(cfg.solver["report"]), gamma=gamma)
    record = cfg.as_dict()
    record["command"] = _command_line(args)
    paths = rep.write(out, record)
    print("\n".join(f"wrote {p}" for p in paths))
    return 0


COMMANDS = {
    "transport": cmd_transport, "check-gradient": cmd_check_gradient, "pde": cmd_pde,
    "simulate": cmd_simulate, "exact": cmd_exact, "experiment": cmd_experiment,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = assemble_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SolverError, RuntimeError, ArithmeticError, MemoryError) as exc:
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
