"""Particle-versus-continuum comparisons at desk scale.

Each experiment returns an ``ExperimentReport`` with one or more tables and
a summary; ``report.write(out_dir, config)`` emits CSV files plus a JSON
manifest holding the configuration, its hash and the replica seeds.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kmc, master, pde
from .errors import ValidationError
from .measures import ProductMeasure, TransportCoefficients
from .model import CylinderFunction, DriveSchedule, RateModel
from .reporting import write_csv, write_manifest

log = logging.getLogger(__name__)

CORRECTION_C = 0.05
PDE_NODES = 256


@dataclass
class ExperimentReport:
    name: str
    tables: dict[str, tuple[list[str], list[tuple]]]
    summary: dict
    seeds: list[str] = field(default_factory=list)

    def write(self, out_dir: str | Path, config: dict) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for key, (cols, rows) in self.tables.items():
            paths.append(write_csv(out / f"{self.name}_{key}.csv", cols, rows))
        paths.append(write_manifest(out / f"{self.name}_manifest.json", config, self.seeds,
                                    summary=self.summary, outputs=[p.name for p in paths]))
        return paths


def default_block_radius(N: int) -> int:
    return math.ceil(N ** 0.4)


def _grid_size(N: int, target: int = PDE_NODES) -> int:
    """Smallest multiple of ``N`` that is at least ``target`` (lattice sites land on nodes)."""
    return N * max(1, math.ceil(target / N))


def _at_sites(values: np.ndarray, N: int) -> np.ndarray:
    M = values.size - 1
    return values[np.arange(1, N) * (M // N)]


def _full_windows(N: int, K: int) -> np.ndarray:
    """Sites ``j`` (1-based) whose block ``{j-K..j+K}`` lies inside ``1..N-1``."""
    j = np.arange(1, N)
    return j[(j - K >= 1) & (j + K <= N - 1)]


def cylinder_average(psi: CylinderFunction, occ: np.ndarray, H: Callable, alpha0: float,
                     alpha1: float) -> float:
    """``(1/N) sum_k H(k/N) psi(tau_k eta)`` with reservoir densities off the lattice."""
    occ = np.asarray(occ, dtype=float)
    N = occ.size + 1
    w = psi.window
    pad_l = max(0, -min(w, default=0)) + 1
    pad_r = max(0, max(w, default=0)) + 1
    ext = np.concatenate([np.full(pad_l, alpha0), occ, np.full(pad_r, alpha1)])
    k = np.arange(1, N)
    vals = np.zeros(N - 1)
    for sites, c in psi.terms.items():
        term = np.full(N - 1, c)
        for s in sites:
            # site k+s sits at index (k+s-1)+pad_l of ext; off-lattice sites read the reservoirs
            idx = k + s - 1 + pad_l
            idx = np.where(k + s <= 0, 0, np.where(k + s >= N, ext.size - 1, idx))
            term = term * ext[idx]
        vals += term
    x = k / N
    Hx = np.array([H(xi) for xi in x], dtype=float)
    return float(np.sum(Hx * vals) / N)


def profile_integral(psi: CylinderFunction, rho: np.ndarray, H: Callable) -> float:
    """``int H(x) E_{nu_rho(x)}[psi] dx`` by the trapezoidal rule on the profile grid."""
    x = np.linspace(0.0, 1.0, rho.size)
    hat = np.polynomial.Polynomial(psi.hat_coefficients())(rho)
    f = np.array([H(xi) for xi in x]) * hat
    return float(np.trapezoid(f, x) if hasattr(np, "trapezoid") else np.trapz(f, x))


# ----------------------------------------------------------------------------
# Hydrodynamic limit


def hydro_limit_experiment(model: RateModel, drive: DriveSchedule, Ns: Sequence[int], gamma: Callable,
                           T: float, checkpoints: Sequence[float], R: int, base_seed: int = 0,
                           K: int | None = None, psi: CylinderFunction | None = None,
                           H: Callable | None = None, method: str = "uniform",
                           workers: int | None = None) -> ExperimentReport:
    """Block densities of the chain sped up by ``ell N^2`` against the PDE solution.

    Only sites whose block fits inside the lattice are compared. The L1
    error is ``(1/N) sum_j |mean_j - rho(t, j/N)|`` and its band is
    ``(1/N) sum_j 4 stderr_j``.
    """
    tc = TransportCoefficients.from_model(model)
    psi = psi or CylinderFunction.occupation(0)
    H = H or (lambda x: 1.0)
    cks = tuple(float(t) for t in checkpoints)
    if not cks or cks[-1] > T + 1e-12:
        raise ValidationError("checkpoints must be non-empty and not beyond T")
    summary_rows, profile_rows, seeds = [], [], []
    summary = {"L1": {}, "band": {}}
    for N in Ns:
        k = default_block_radius(N) if K is None else K
        M = _grid_size(N)
        sol = pde.solve_parabolic(tc, drive, gamma, T, M=M, report=list(cks))
        observers = {
            "block": lambda t, occ, k=k: kmc.block_density_profile(occ, k),
            "psi": lambda t, occ: cylinder_average(psi, occ, H, *drive.alphas(t)),
        }
        spec = kmc.EnsembleSpec(model, drive, N, drive.ell * N**2, gamma, cks, observers, method)
        ens = kmc.run_ensemble(spec, R, base_seed, workers, keep_samples=False)
        seeds.extend(ens.seeds)
        sites = _full_windows(N, k)
        for i, t in enumerate(ens.times):
            prof = sol.at(t).values
            rho = _at_sites(prof, N)
            mean = ens.mean["block"][i]
            se = ens.stderr["block"][i]
            for j in sites:
                profile_rows.append((N, t, j / N, mean[j - 1], se[j - 1], rho[j - 1]))
            l1 = float(np.sum(np.abs(mean[sites - 1] - rho[sites - 1])) / N)
            band = float(np.sum(4 * se[sites - 1]) / N)
            psi_theory = profile_integral(psi, prof, H)
            summary_rows.append((N, t, l1, band, ens.mean["psi"][i], ens.stderr["psi"][i], psi_theory, R))
            summary["L1"][f"{N}@{t:g}"] = l1
            summary["band"][f"{N}@{t:g}"] = band
    return ExperimentReport(
        "hydro",
        {
            "summary": (["N", "t", "L1", "band", "psi_mean", "psi_stderr", "psi_theory", "n"], summary_rows),
            "profiles": (["N", "t", "x", "mean", "stderr", "pde"], profile_rows),
        },
        summary,
        seeds,
    )


# ----------------------------------------------------------------------------
# First-order correction


def correction_profile(transport: TransportCoefficients, drive: DriveSchedule, t: float, M: int) -> np.ndarray:
    return pde.correction_at(transport, drive, t, M).values


def _bootstrap_ratio(u_samples: np.ndarray, v: np.ndarray, sites: np.ndarray, N: int, eps: float,
                     C: float, rng: np.random.Generator, n_boot: int = 200) -> float:
    """Bootstrap spread of the band-normalized L1 residual over replicas."""
    R = u_samples.shape[0]
    out = np.empty(n_boot)
    for b in range(n_boot):
        pick = u_samples[rng.integers(0, R, R)]
        mean = pick.mean(axis=0)
        se = pick.std(axis=0, ddof=1) / math.sqrt(R)
        l1 = np.sum(np.abs(mean[sites - 1] - v[sites - 1])) / N
        band = np.sum(4 * se[sites - 1]) / N + C * eps * sites.size / N
        out[b] = l1 / band
    return float(out.std(ddof=1))


def correction_experiment(model: RateModel, drive: DriveSchedule, Ns: Sequence[int], T: float,
                          R: int, base_seed: int = 0, gamma: Callable | None = None,
                          epsilon: Callable[[int], float] | None = None, K: int | None = None,
                          checkpoints: Sequence[float] | None = None, C_fit: float = CORRECTION_C,
                          psi: CylinderFunction | None = None, H: Callable | None = None,
                          method: str = "uniform", workers: int | None = None) -> ExperimentReport:
    """Rescaled fluctuation ``u = (eta^K - alpha)/eps`` at speed ``N^2/eps`` against the correction ``v_t``.

    ``epsilon(N)`` defaults to ``N^{-1/5}``. The chain starts from the product
    measure at ``alpha(0) + eps gamma`` where ``gamma`` defaults to the
    correction profile at time 0. Residuals are compared with the band
    ``4 stderr + C_fit eps`` on full-window sites.
    """
    if drive.has_field:
        raise ValidationError("the correction experiment runs with zero field")
    for s in (0.0, T):
        if abs(drive.lambda0(s) - drive.lambda1(s)) > 1e-14:
            raise ValidationError("the correction experiment needs equal reservoirs")
    epsilon = epsilon or (lambda N: N ** -0.2)
    tc = TransportCoefficients.from_model(model)
    psi = psi or CylinderFunction.occupation(0)
    H = H or (lambda x: 1.0)
    cks = tuple(float(t) for t in (checkpoints or (T,)))
    rows, stat_rows, seeds = [], [], []
    summary: dict = {"C_fit": C_fit, "per_N": {}}
    boot_rng = np.random.default_rng(np.random.SeedSequence(base_seed).spawn(1)[0].generate_state(1)[0])
    for N in Ns:
        eps = float(epsilon(N))
        k = default_block_radius(N) if K is None else K
        M = _grid_size(N)
        x_grid = np.linspace(0.0, 1.0, M + 1)
        g = GammaOnGrid(gamma(x_grid) if gamma is not None else correction_profile(tc, drive, 0.0, M))
        a00 = drive.alpha0(0.0)
        init = ProductMeasure(a00 + eps * _at_sites(g.values, N))
        if N * eps**4 <= 1.0:
            log.warning("eps^4 N = %.3g is not large for N=%d", N * eps**4, N)
        observers = {
            "u": lambda t, occ, k=k, eps=eps: (kmc.block_density_profile(occ, k) - drive.alpha0(t)) / eps,
            "stat": lambda t, occ: cylinder_average(psi, occ, H, *drive.alphas(t)),
        }
        spec = kmc.EnsembleSpec(model, drive, N, N**2 / eps, init, cks, observers, method)
        ens = kmc.run_ensemble(spec, R, base_seed, workers, keep_samples=True)
        seeds.extend(ens.seeds)
        sites = _full_windows(N, k)
        per = summary["per_N"][str(N)] = {"eps": eps, "K": k, "R": R, "times": {}}
        for i, t in enumerate(ens.times):
            if i == 0:
                continue
            v = _at_sites(correction_profile(tc, drive, t, M), N)
            mean = ens.mean["u"][i]
            se = ens.stderr["u"][i]
            for j in sites:
                rows.append((N, t, j / N, mean[j - 1], se[j - 1], v[j - 1]))
            diff = np.abs(mean[sites - 1] - v[sites - 1])
            l1 = float(np.sum(diff) / N)
            sup = float(np.max(diff))
            mc_band = float(np.sum(4 * se[sites - 1]) / N)
            band = mc_band + C_fit * eps * sites.size / N
            excess = max(0.0, l1 - mc_band) / (eps * sites.size / N)
            spread = _bootstrap_ratio(ens.samples["u"][:, i, :], v, sites, N, eps, C_fit, boot_rng)
            # Psi statistic: mean of |average - profile integral| / eps
            alpha = drive.alpha0(t)
            target = profile_integral(psi, alpha + eps * correction_profile(tc, drive, t, M), H)
            stat = float(np.mean(np.abs(ens.samples["stat"][:, i] - target)) / eps)
            per["times"][f"{t:g}"] = {
                "L1": l1, "sup": sup, "mc_band": mc_band, "band": band, "ratio": l1 / band,
                "ratio_spread": spread, "C_needed": excess, "psi_stat": stat,
            }
            stat_rows.append((N, t, eps, k, l1, sup, mc_band, band, l1 / band, spread, excess, stat, R))
    return ExperimentReport(
        "correction",
        {
            "profiles": (["N", "t", "x", "u_emp", "u_stderr", "v_theory"], rows),
            "summary": (["N", "t", "eps", "K", "L1", "sup", "mc_band", "band", "ratio", "ratio_spread",
                         "C_needed", "psi_stat", "n"], stat_rows),
        },
        summary,
        seeds,
    )


@dataclass
class GammaOnGrid:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if abs(self.values[0]) > 1e-12 or abs(self.values[-1]) > 1e-12:
            raise ValidationError("gamma must vanish at both ends")


# ----------------------------------------------------------------------------
# Exact entropy


def entropy_experiment(model: RateModel, drive: DriveSchedule, N: int, T: float, dt_report: float,
                       gamma: Callable | None = None, M: int | None = None) -> ExperimentReport:
    """Exact relative entropy of the chain sped up by ``ell N^2`` w.r.t. the local equilibrium of the PDE.

    The PDE runs at speed ``ell`` from ``rho_bar(0) + eps gamma``; the chain
    starts from the product measure with exactly those densities, so the
    entropy is zero at time 0. ``gamma`` defaults to the correction profile.
    """
    tc = TransportCoefficients.from_model(model)
    eps, ell = drive.epsilon, drive.ell
    M = _grid_size(N) if M is None else M
    if M % N:
        raise ValidationError("PDE grid size must be a multiple of N")
    x = np.linspace(0.0, 1.0, M + 1)
    rho_bar0 = pde.stationary_profile(tc, drive, 0.0, M).values
    g = gamma(x) if gamma is not None else correction_profile(tc, drive, 0.0, M)
    g = GammaOnGrid(np.asarray(g, dtype=float) * np.ones_like(x)).values
    rho0 = rho_bar0 + eps * g
    times = master.report_times(0.0, T, dt_report)
    sol = pde.solve_parabolic(tc, drive, rho0, T, M=M, ell=ell, report=list(times[1:]))
    profiles = np.array([_at_sites(v, N) for v in sol.values])
    p0 = ProductMeasure(profiles[0]).probabilities()
    traj = master.entropy_trajectory(p0, model, drive, ell * N**2, profiles, T, dt_report, N=N)
    rows = traj.rows()
    summary = {
        "theta_time": ell * N**2, "eps": eps, "ell": ell, "N": N,
        "H_norm_max": float(np.max(traj.H_norm)), "H_norm_final": float(traj.H_norm[-1]),
    }
    return ExperimentReport("entropy", {"trajectory": (["t", "H", "H_norm"], rows)}, summary)
