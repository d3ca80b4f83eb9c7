"""Finite-difference solvers for the macroscopic equations.

The evolution is written in conservative form on the uniform grid
``x_i = i/M`` with Dirichlet data at both ends. The face flux is

    F_{i+1/2} = (K(rho_{i+1}) - K(rho_i)) / h - chi(mean) * E(t, x_{i+1/2})

where ``K`` is the antiderivative of ``D``. Since ``chi f'' = D``, the first
term is the exact face average of ``chi d f'(rho)/dx`` along the segment,
which makes stationary profiles with zero field exact on the grid.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .errors import MaximumPrincipleError, NewtonError, SolverError, ValidationError
from .measures import TransportCoefficients
from .model import DriveSchedule, logistic

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-11
MAX_NEWTON = 40


@dataclass
class GridProfile:
    """Values at the ``M+1`` nodes ``i/M`` of [0,1], stamped with a time."""

    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 3:
            raise ValidationError("a grid profile needs at least 3 nodes")

    @classmethod
    def from_function(cls, f: Callable, M: int, t: float = 0.0) -> "GridProfile":
        x = np.linspace(0.0, 1.0, M + 1)
        try:
            v = np.asarray(f(x), dtype=float)
            if v.shape != x.shape:
                v = np.broadcast_to(v, x.shape).copy()
        except TypeError:
            v = np.array([f(xi) for xi in x], dtype=float)
        return cls(v, t)

    @property
    def M(self) -> int:
        return self.values.size - 1

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.M + 1)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def l2_norm(self) -> float:
        return l2_norm(self.values)

    def at(self, x) -> np.ndarray:
        return np.interp(x, self.x, self.values)

    def is_density(self) -> bool:
        return bool(np.all(self.values > 0.0) and np.all(self.values < 1.0))


def l2_norm(values: np.ndarray) -> float:
    """Trapezoidal ``L^2([0,1])`` norm of nodal values."""
    v = np.asarray(values, dtype=float)
    h = 1.0 / (v.size - 1)
    sq = v * v
    return math.sqrt(h * (sq.sum() - 0.5 * (sq[0] + sq[-1])))


def _as_profile(rho0, M: int) -> np.ndarray:
    if isinstance(rho0, GridProfile):
        if rho0.M != M:
            raise ValidationError(f"initial profile has M={rho0.M}, solver grid has M={M}")
        return rho0.values.copy()
    if callable(rho0):
        return GridProfile.from_function(rho0, M).values
    v = np.asarray(rho0, dtype=float)
    if v.ndim == 0:
        return np.full(M + 1, float(v))
    if v.shape != (M + 1,):
        raise ValidationError(f"initial profile has shape {v.shape}, expected ({M + 1},)")
    return v.copy()


# ----------------------------------------------------------------------------
# Discrete operator


class _FluxOperator:
    """Flux divergence ``G(rho)_i = (F_{i+1/2} - F_{i-1/2}) / h`` and its tridiagonal Jacobian."""

    def __init__(self, tc: TransportCoefficients, M: int):
        self.tc = tc
        self.M = M
        self.h = 1.0 / M
        self.x = np.linspace(0.0, 1.0, M + 1)
        self.faces = (self.x[:-1] + self.x[1:]) / 2

    def fluxes(self, rho: np.ndarray, E_face: np.ndarray | None):
        h = self.h
        K = self.tc.kirchhoff(rho)
        F = (K[1:] - K[:-1]) / h
        dFl = -self.tc.D(rho[:-1]) / h
        dFr = self.tc.D(rho[1:]) / h
        if E_face is not None:
            m = 0.5 * (rho[1:] + rho[:-1])
            F = F - self.tc.chi(m) * E_face
            half = 0.5 * self.tc.dchi(m) * E_face
            dFl = dFl - half
            dFr = dFr - half
        return F, dFl, dFr

    def divergence(self, rho: np.ndarray, E_face: np.ndarray | None):
        """Interior divergence and its banded Jacobian (``solve_banded`` layout)."""
        h = self.h
        F, dFl, dFr = self.fluxes(rho, E_face)
        G = (F[1:] - F[:-1]) / h
        n = self.M - 1
        J = np.zeros((3, n))
        # dG_i/d rho_{i+1}, dG_i/d rho_i, dG_i/d rho_{i-1} for interior i = 1..M-1
        J[0, 1:] = dFr[1:-1] / h
        J[1, :] = (dFl[1:] - dFr[:-1]) / h
        J[2, :-1] = -dFl[1:-1] / h
        return G, J, F


def _field_faces(drive: DriveSchedule, t: float, faces: np.ndarray) -> np.ndarray | None:
    return drive.field_values(t, faces) if drive.has_field else None


# ----------------------------------------------------------------------------
# Time-dependent problem


@dataclass
class ParabolicSolution:
    times: np.ndarray
    values: np.ndarray
    ell: float
    mass_defect: float
    newton_iterations: int
    steps: int

    @property
    def M(self) -> int:
        return self.values.shape[1] - 1

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.M + 1)

    def profile(self, k: int) -> GridProfile:
        return GridProfile(self.values[k], float(self.times[k]))

    def at(self, t: float) -> GridProfile:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"t={t} is not a report time")
        return self.profile(k)


def _newton(residual_jac, y0: np.ndarray, tol: float, what: str):
    """Damped Newton on a tridiagonal system; rejects iterates leaving (0,1)."""
    y = y0.copy()
    R, J = residual_jac(y)
    rn = float(np.max(np.abs(R)))
    for it in range(MAX_NEWTON + 1):
        if rn <= tol:
            return y, it
        if it == MAX_NEWTON:
            break
        try:
            dy = solve_banded((1, 1), J, -R)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NewtonError(f"{what}: singular Jacobian ({exc})") from exc
        step = 1.0
        while True:
            trial = y + step * dy
            if np.all(trial > 0.0) and np.all(trial < 1.0):
                Rt, Jt = residual_jac(trial)
                rt = float(np.max(np.abs(Rt)))
                if rt < rn or rt <= tol:
                    break
            step *= 0.5
            if step < 1e-10:
                # no further decrease possible: accept if we sit at the rounding floor of R
                floor = 4.0 * np.finfo(float).eps * float(np.max(np.abs(J).sum(axis=0)))
                if rn <= max(tol, floor):
                    return y, it
                raise NewtonError(f"{what}: line search stalled at residual {rn:.3e} after {it} iterations")
        y, R, J, rn = trial, Rt, Jt, rt
    raise NewtonError(f"{what}: no convergence after {MAX_NEWTON} iterations (residual {rn:.3e})")


def _report_grid(t0: float, T: float, report) -> np.ndarray:
    if report is None:
        return np.array([t0, T])
    if np.ndim(report) == 0:
        dt_r = float(report)
        n = int(math.floor((T - t0) / dt_r + 1e-9))
        times = t0 + dt_r * np.arange(n + 1)
        if T - times[-1] > 1e-12 * max(1.0, abs(T)):
            times = np.append(times, T)
        return times
    times = np.unique(np.concatenate([[t0], np.asarray(report, dtype=float)]))
    if times[-1] > T + 1e-12 or times[0] < t0:
        raise ValidationError("report times must lie in [t0, T]")
    return times


def solve_parabolic(
    transport: TransportCoefficients,
    drive: DriveSchedule,
    rho0,
    T: float,
    M: int = 256,
    dt: float | None = None,
    ell: float | None = None,
    report=None,
    t0: float = 0.0,
    newton_tol: float = NEWTON_TOL,
    startup_steps: int = 2,
    check_max_principle: bool | None = None,
) -> ParabolicSolution:
    """Integrate ``d rho/dt = ell d/dx{chi(rho)[d/dx f'(rho) - E]}`` with Dirichlet reservoir data.

    Trapezoidal (Crank-Nicolson) steps with Newton per step; the first
    ``startup_steps`` steps are backward Euler to damp stiff transients.
    ``report`` is a spacing or a list of times, all hit exactly.
    """
    if M < 16:
        raise ValidationError("need M >= 16")
    ell = drive.ell if ell is None else float(ell)
    if not ell > 0:
        raise ValidationError("ell must be positive")
    dt = 1e-3 / ell if dt is None else float(dt)
    if not dt > 0 or not T >= t0:
        raise ValidationError("need dt > 0 and T >= t0")
    op = _FluxOperator(transport, M)
    h = op.h
    rho = _as_profile(rho0, M)
    a0, a1 = drive.alphas(t0)
    if abs(rho[0] - a0) > 1e-8 or abs(rho[-1] - a1) > 1e-8:
        raise ValidationError(
            f"initial profile ends ({rho[0]:.6g}, {rho[-1]:.6g}) differ from boundary densities ({a0:.6g}, {a1:.6g})"
        )
    rho[0], rho[-1] = a0, a1
    if not np.all((rho > 0) & (rho < 1)):
        raise ValidationError("initial density must lie in (0,1)")
    if check_max_principle is None:
        check_max_principle = not drive.has_field
    lo, hi = float(rho.min()), float(rho.max())

    times = _report_grid(t0, T, report)
    out = np.empty((times.size, M + 1))
    out[0] = rho
    flux_int = 0.0
    mass0 = h * rho[1:-1].sum()
    n_newton = 0
    n_steps = 0
    t = t0
    E_old = _field_faces(drive, t, op.faces)
    G_old, _, F_old = op.divergence(rho, E_old)
    for k in range(1, times.size):
        span = times[k] - times[k - 1]
        n_sub = max(1, math.ceil(span / dt - 1e-9))
        tau = span / n_sub
        for s in range(n_sub):
            t_new = times[k - 1] + (s + 1) * tau if s < n_sub - 1 else times[k]
            b0, b1 = drive.alphas(t_new)
            E_new = _field_faces(drive, t_new, op.faces)
            theta = 1.0 if n_steps < startup_steps else 0.5
            base = rho[1:-1] + (1.0 - theta) * tau * ell * G_old

            def residual_jac(y, b0=b0, b1=b1, E_new=E_new, theta=theta, base=base):
                full = np.concatenate([[b0], y, [b1]])
                G, J, _ = op.divergence(full, E_new)
                R = y - theta * tau * ell * G - base
                Jr = -theta * tau * ell * J
                Jr[1] += 1.0
                return R, Jr

            guess = rho[1:-1]
            try:
                y, its = _newton(residual_jac, guess, newton_tol, f"step to t={t_new:.6g}")
            except NewtonError as exc:
                raise NewtonError(f"{exc} (dt={tau:.3e}, M={M}, ell={ell:g})") from exc
            n_newton += its
            n_steps += 1
            new = np.concatenate([[b0], y, [b1]])
            G_new, _, F_new = op.divergence(new, E_new)
            flux_int += tau * ell * (theta * (F_new[-1] - F_new[0]) + (1 - theta) * (F_old[-1] - F_old[0]))
            if not np.all((new > 0) & (new < 1)):
                raise MaximumPrincipleError(f"density left (0,1) at t={t_new:.6g}")
            # boundary data are only sampled at step ends, so their extremes
            # inside a step are known up to the change across the step
            wiggle = max(abs(b0 - rho[0]), abs(b1 - rho[-1]))
            lo, hi = min(lo, b0, b1), max(hi, b0, b1)
            if check_max_principle:
                slack = 1e-9 * max(1.0, hi - lo) + wiggle
                if new.min() < lo - slack or new.max() > hi + slack:
                    raise MaximumPrincipleError(
                        f"profile range [{new.min():.12g}, {new.max():.12g}] exceeds [{lo:.12g}, {hi:.12g}] at t={t_new:.6g}"
                    )
            rho, G_old, F_old, t = new, G_new, F_new, t_new
        out[k] = rho
    defect = abs(h * rho[1:-1].sum() - mass0 - flux_int)
    return ParabolicSolution(times, out, ell, defect, n_newton, n_steps)


# ----------------------------------------------------------------------------
# Stationary problem


def _field_callable(E) -> Callable | None:
    if E is None:
        return None
    if callable(E):
        return E
    value = float(E)
    return None if value == 0.0 else (lambda x: np.full_like(np.asarray(x, dtype=float), value))


def solve_stationary(
    transport: TransportCoefficients,
    lambdas: tuple[float, float],
    E: Callable | float | None = None,
    M: int = 256,
    tol: float = 1e-10,
) -> GridProfile:
    """Stationary profile with reservoir potentials ``lambdas`` and field ``E(x)``."""
    lam0, lam1 = map(float, lambdas)
    if not (math.isfinite(lam0) and math.isfinite(lam1)):
        raise ValidationError("chemical potentials must be finite")
    a0, a1 = logistic(lam0), logistic(lam1)
    op = _FluxOperator(transport, M)
    Ef = _field_callable(E)
    E_face = None if Ef is None else np.asarray(Ef(op.faces), dtype=float) * np.ones_like(op.faces)

    def residual_jac(y):
        full = np.concatenate([[a0], y, [a1]])
        G, J, _ = op.divergence(full, E_face)
        return G, J

    guess = a0 + (a1 - a0) * op.x[1:-1]
    try:
        y, _ = _newton(residual_jac, guess, tol, "stationary solve")
    except NewtonError as first:
        log.info("stationary Newton failed (%s); restarting from a relaxed profile", first)
        drive = DriveSchedule(lambda t: lam0, lambda t: lam1,
                              None if Ef is None else (lambda t, x: Ef(x)))
        y = guess
        for horizon in (0.1, 1.0, 10.0):
            sol = solve_parabolic(transport, drive, np.concatenate([[a0], y, [a1]]), horizon, M=M,
                                  dt=horizon / 200, check_max_principle=False)
            y = sol.values[-1, 1:-1]
            try:
                y, _ = _newton(residual_jac, y, tol, "stationary solve")
                break
            except NewtonError:
                continue
        else:
            raise NewtonError("stationary solve diverged after damped restarts") from first
    return GridProfile(np.concatenate([[a0], y, [a1]]))


def stationary_residual(transport: TransportCoefficients, profile: GridProfile, E=None) -> float:
    op = _FluxOperator(transport, profile.M)
    Ef = _field_callable(E)
    E_face = None if Ef is None else np.asarray(Ef(op.faces), dtype=float) * np.ones_like(op.faces)
    G, _, _ = op.divergence(profile.values, E_face)
    return float(np.max(np.abs(G)))


def stationary_profile(transport: TransportCoefficients, drive: DriveSchedule, t: float, M: int = 256) -> GridProfile:
    E = (lambda x: drive.field_values(t, x)) if drive.has_field else None
    prof = solve_stationary(transport, (drive.lambda0(t), drive.lambda1(t)), E, M)
    prof.t = t
    return prof


# ----------------------------------------------------------------------------
# First-order correction


def _derivative(f: Callable[[float], float], t: float, h: float = 1e-3) -> float:
    """Fourth-order central difference."""
    return (8.0 * (f(t + h) - f(t - h)) - (f(t + 2 * h) - f(t - 2 * h))) / (12.0 * h)


def _is_flat(drive: DriveSchedule, t: float, delta: float) -> bool:
    if drive.has_field:
        return False
    return all(abs(drive.lambda0(s) - drive.lambda1(s)) < 1e-14 for s in (t - delta, t, t + delta))


def stationary_time_derivative(transport: TransportCoefficients, drive: DriveSchedule, t: float,
                               M: int = 256, delta: float = 1e-4) -> np.ndarray:
    """``d/dt`` of the stationary profile at ``t``.

    For equal reservoirs and no field the profile is the constant
    ``alpha(t)``, whose derivative is taken directly; otherwise the
    stationary solve is differenced at ``t +- delta``.
    """
    if _is_flat(drive, t, delta):
        return np.full(M + 1, _derivative(drive.alpha0, t))
    plus = stationary_profile(transport, drive, t + delta, M).values
    minus = stationary_profile(transport, drive, t - delta, M).values
    return (plus - minus) / (2 * delta)


def _solve_tridiagonal_dirichlet(lower, diag, upper, rhs, what: str) -> np.ndarray:
    n = diag.size
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    try:
        sol = solve_banded((1, 1), ab, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"{what}: singular system ({exc})") from exc
    if not np.all(np.isfinite(sol)):
        raise SolverError(f"{what}: singular system")
    res = lower * np.concatenate([[0.0], sol[:-1]]) + diag * sol + upper * np.concatenate([sol[1:], [0.0]]) - rhs
    scale = max(1.0, float(np.max(np.abs(rhs))))
    if float(np.max(np.abs(res))) > 1e-10 * scale:
        raise SolverError(f"{what}: residual {np.max(np.abs(res)):.3e} above tolerance")
    return sol


def solve_correction(transport: TransportCoefficients, rho_bar: GridProfile, drho_dt: np.ndarray,
                     E: np.ndarray | None = None) -> GridProfile:
    """``v`` with ``v(0)=v(1)=0`` and ``d^2/dx^2 (D(rho_bar) v) - d/dx (chi'(rho_bar) E v) = d rho_bar/dt``.

    ``E`` holds field values at the nodes (``None`` for no field).
    """
    M = rho_bar.M
    drho_dt = np.asarray(drho_dt, dtype=float)
    if drho_dt.shape != (M + 1,):
        raise ValidationError("time derivative must live on the profile grid")
    h = 1.0 / M
    Dn = transport.D(rho_bar.values)
    a = np.zeros(M + 1) if E is None else transport.dchi(rho_bar.values) * np.asarray(E, dtype=float)
    # interior unknowns v_1..v_{M-1}; coefficients of v_{i-1}, v_i, v_{i+1}
    lower = Dn[:-2] / h**2 + a[:-2] / (2 * h)
    diag = -2.0 * Dn[1:-1] / h**2
    upper = Dn[2:] / h**2 - a[2:] / (2 * h)
    v = _solve_tridiagonal_dirichlet(lower, diag, upper, drho_dt[1:-1], "correction solve")
    return GridProfile(np.concatenate([[0.0], v, [0.0]]), rho_bar.t)


def solve_correction_quasistatic(transport: TransportCoefficients, alpha: float, dalpha: float,
                                 M: int = 256, t: float = 0.0) -> GridProfile:
    """``v`` with ``d/dx(D(alpha) dv/dx) = dalpha``, ``v(0)=v(1)=0``; ``alpha`` is constant in space."""
    h = 1.0 / M
    D0 = float(transport.D(alpha))
    n = M - 1
    lower = np.full(n, D0 / h**2)
    upper = np.full(n, D0 / h**2)
    diag = np.full(n, -2.0 * D0 / h**2)
    v = _solve_tridiagonal_dirichlet(lower, diag, upper, np.full(n, float(dalpha)), "correction solve")
    return GridProfile(np.concatenate([[0.0], v, [0.0]]), t)


def correction_at(transport: TransportCoefficients, drive: DriveSchedule, t: float, M: int = 256) -> GridProfile:
    """Correction profile at time ``t`` for the given drive."""
    rho_bar = stationary_profile(transport, drive, t, M)
    dr = stationary_time_derivative(transport, drive, t, M)
    E = drive.field_values(t, rho_bar.x) if drive.has_field else None
    return solve_correction(transport, rho_bar, dr, E)


# ----------------------------------------------------------------------------
# Quasi-static limit


@dataclass
class GapRow:
    nu: float
    t: float
    gap: float


def quasi_static_gap(transport: TransportCoefficients, drive: DriveSchedule, v0: Callable,
                     nus: Sequence[float], times: Sequence[float], M: int = 256,
                     dt: float | None = None, startup_steps: int = 2) -> tuple[list[GapRow], dict]:
    """``||u_nu(t) - v_t||_2`` with ``u_nu = nu (rho_nu - alpha)`` for each ``nu``.

    ``rho_nu`` starts from ``alpha(0) + v0/nu`` and evolves at speed ``nu``
    with equal reservoirs and no field. Returns the rows and the solutions.
    """
    if drive.has_field:
        raise ValidationError("the quasi-static comparison is for zero field")
    times = sorted(float(t) for t in times)
    T = times[-1]
    x = np.linspace(0.0, 1.0, M + 1)
    v0x = GridProfile.from_function(v0, M).values
    if abs(v0x[0]) > 1e-12 or abs(v0x[-1]) > 1e-12:
        raise ValidationError("v0 must vanish at both ends")
    al0 = drive.alpha0(0.0)
    d2 = (v0x[2] - 2 * v0x[1] + v0x[0]) * M**2
    if abs(_derivative(drive.alpha0, 0.0) - transport.D(al0) * d2) > 1e-3:
        log.warning("initial datum is not compatible with the boundary data at t=0; expect an initial layer")
    rows: list[GapRow] = []
    sols = {}
    for nu in nus:
        rho0 = al0 + v0x / nu
        if not np.all((rho0 > 0) & (rho0 < 1)):
            raise ValidationError(f"initial profile leaves (0,1) for nu={nu}")
        sol = solve_parabolic(transport, drive, rho0, T, M=M, dt=dt if dt is not None else 1e-3,
                              ell=nu, report=times, startup_steps=startup_steps)
        sols[nu] = sol
        for t in times:
            prof = sol.at(t)
            alpha = drive.alpha0(t)
            u = nu * (prof.values - alpha)
            v = solve_correction_quasistatic(transport, alpha, _derivative(drive.alpha0, t), M, t)
            rows.append(GapRow(float(nu), t, l2_norm(u - v.values)))
    return rows, sols


# ----------------------------------------------------------------------------
# A-priori bound diagnostics


@dataclass
class DiagnosticsReport:
    table: list[dict]
    plateau: dict[float, float]
    slope: float
    B_fit: float
    F_ell: dict[float, float]
    delta_min: float
    flags: list[str]


def _second_difference(v: np.ndarray) -> np.ndarray:
    M = v.size - 1
    d2 = (v[2:] - 2 * v[1:-1] + v[:-2]) * M**2
    # nodes 1 and M-1 touch the boundary; keep nodes 2..M-2
    return d2[1:-1]


def apriori_diagnostics(transport: TransportCoefficients, drive: DriveSchedule,
                        solutions: dict[float, ParabolicSolution], T: float,
                        epsilon: Callable[[float], float] | None = None,
                        B_max: float = 50.0) -> DiagnosticsReport:
    """Sup-norm diagnostics across a family of solutions indexed by their speed ``nu``.

    The plateau of ``||rho - alpha||_inf`` is its maximum over ``[T/2, T]``;
    ``B_fit`` is the smallest ``B`` with ``||d2 rho||_inf <= B sqrt(eps^2 + nu^-4)``
    at every report time, with ``eps = 1/nu`` unless ``epsilon`` is given.
    """
    epsilon = epsilon or (lambda nu: 1.0 / nu)
    table = []
    plateau: dict[float, float] = {}
    F_ell: dict[float, float] = {}
    B_fit = 0.0
    delta_min = 1.0
    for nu, sol in sorted(solutions.items()):
        M = sol.M
        x = sol.x
        faces = (x[:-1] + x[1:]) / 2
        pl = 0.0
        fmax = 0.0
        env = math.sqrt(epsilon(nu) ** 2 + nu**-4.0)
        for t, rho in zip(sol.times, sol.values):
            alpha = drive.alpha0(t)
            dev = float(np.max(np.abs(rho - alpha)))
            d1 = float(np.max(np.abs(np.diff(rho)))) * M
            d2 = float(np.max(np.abs(_second_difference(rho))))
            fp = transport.fp(rho)
            F = np.diff(fp) * M - (drive.field_values(t, faces) if drive.has_field else 0.0)
            Fn = float(np.max(np.abs(F)))
            dF = float(np.max(np.abs(np.diff(F)))) * M
            dmin = float(min(rho.min(), 1.0 - rho.max()))
            delta_min = min(delta_min, dmin)
            table.append(dict(nu=float(nu), t=float(t), dev=dev, d1=d1, d2=d2, F=Fn, dF=dF, delta=dmin))
            if t >= T / 2 - 1e-12:
                pl = max(pl, dev)
            fmax = max(fmax, Fn)
            B_fit = max(B_fit, d2 / env)
        plateau[float(nu)] = pl
        F_ell[float(nu)] = fmax * sol.ell
    nus = np.array(sorted(plateau))
    vals = np.array([plateau[n] for n in nus])
    if nus.size >= 2 and np.all(vals > 0):
        slope = float(np.polyfit(np.log(nus), np.log(vals), 1)[0])
    else:
        slope = float("nan")
    flags = []
    if delta_min <= 0.0:
        flags.append("density touched 0 or 1")
    if B_fit > B_max:
        flags.append(f"second-derivative envelope constant {B_fit:.3g} exceeds {B_max:g}")
    return DiagnosticsReport(table, plateau, slope, B_fit, F_ell, delta_min, flags)
