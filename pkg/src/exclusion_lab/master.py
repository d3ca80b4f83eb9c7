"""Exact finite-state layer: generator matrix, forward evolution, stationary laws.

States are integer keys; bit ``j-1`` of the key is the occupation of site
``j``. Everything is vectorized over the ``2^(N-1)`` states and written
independently of the simulation kernels so that the two can be compared.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.sparse.linalg import spsolve

from .errors import CapacityError, SolverError, ValidationError
from .measures import ProductMeasure, relative_entropy_general
from .model import DriveSchedule, RateModel, all_configurations

log = logging.getLogger(__name__)

MAX_SITES = 14
POISSON_TAIL = 1e-14
MAX_CHUNK_MEAN = 25.0
DRIVE_TOL = 1e-4
MIN_SUBSTEP = 1e-12
FROZEN_JUMPS = 0.05
BATCH = 256


def _check_capacity(N: int) -> int:
    n = N - 1
    if n < 1:
        raise ValidationError("need at least one site (N >= 2)")
    if n > MAX_SITES:
        raise CapacityError(
            f"exact layer holds at most {MAX_SITES} sites ({1 << MAX_SITES} states); N-1={n} requested"
        )
    return n


@dataclass(frozen=True)
class _Moves:
    """Source/target keys of every state-changing move, grouped by bond."""

    N: int
    occ: np.ndarray
    src: list[np.ndarray]
    dst: list[np.ndarray]


_MOVES: dict[int, _Moves] = {}


def _moves(N: int) -> _Moves:
    if N in _MOVES:
        return _MOVES[N]
    n = _check_capacity(N)
    occ = all_configurations(n)
    keys = np.arange(1 << n, dtype=np.int64)
    src, dst = [], []
    for b in range(N):
        if b == 0:
            s = keys
            d = keys ^ 1
        elif b == N - 1:
            s = keys
            d = keys ^ (1 << (n - 1))
        else:
            s = keys[occ[:, b - 1] != occ[:, b]]
            d = s ^ ((1 << (b - 1)) | (1 << b))
        src.append(s)
        dst.append(d)
    out = _Moves(N, occ, src, dst)
    _MOVES[N] = out
    return out


class _RateTable:
    """Per-move coefficient arrays so that all rates at a time ``t`` cost a few vector operations.

    Every factor of a rate is affine in the reservoir densities, so each is
    stored as ``base + coef0 * alpha0 + coef1 * alpha1``; the tilt exponent
    is ``E(t, x_bond) * sign / 2N``.
    """

    def __init__(self, model: RateModel, N: int):
        mv = _moves(N)
        self.N = N
        self.size = mv.occ.shape[0]
        bonds = np.concatenate([np.full(s.size, b) for b, s in enumerate(mv.src)])
        self.bond = bonds
        self.src = np.concatenate(mv.src)
        self.dst = np.concatenate(mv.dst)
        occ = mv.occ[self.src].astype(float)
        left, right = bonds == 0, bonds == N - 1
        # reservoir flip factor alpha(1-s) + s(1-alpha)
        s1 = occ[:, 0]
        sN = occ[:, N - 2]
        self.flip_base = np.where(left, s1, np.where(right, sN, 1.0))
        self.flip0 = np.where(left, 1 - 2 * s1, 0.0)
        self.flip1 = np.where(right & ~left, 1 - 2 * sN, 0.0)
        inner = ~(left | right)
        d = np.zeros(bonds.size)
        d[inner] = occ[inner, bonds[inner] - 1] - occ[inner, np.minimum(bonds[inner], N - 2)]
        self.tilt_sign = np.where(left, 1 - 2 * s1, np.where(right, -(1 - 2 * sN), d))
        self.bond_x = np.arange(N) / N
        self.bond_x[-1] = 1.0
        self.terms = []
        for sites, coef in model.c.terms.items():
            factors = []
            for k in sites:
                i = bonds + k
                on = (i >= 1) & (i <= N - 1)
                vals = np.zeros(bonds.size)
                vals[on] = occ[on, i[on] - 1]
                factors.append((vals, (i <= 0).astype(float), (i >= N).astype(float)))
            self.terms.append((coef, factors))
        # CSR layout of the transposed generator (row = target, col = source)
        rows = np.concatenate([self.dst, np.arange(self.size)])
        cols = np.concatenate([self.src, np.arange(self.size)])
        keys, self.slot = np.unique(rows * self.size + cols, return_inverse=True)
        self.indices = (keys % self.size).astype(np.int32)
        self.indptr = np.searchsorted(keys // self.size, np.arange(self.size + 1)).astype(np.int32)
        self.n_moves = self.src.size

    def rates(self, drive: DriveSchedule, t: float) -> np.ndarray:
        a0, a1 = drive.alphas(t)
        c = np.zeros(self.n_moves)
        for coef, factors in self.terms:
            term = np.full(self.n_moves, coef)
            for vals, on_left, on_right in factors:
                term *= vals + a0 * on_left + a1 * on_right
            c += term
        r = (self.flip_base + a0 * self.flip0 + a1 * self.flip1) * c
        if drive.has_field:
            E = drive.field_values(t, self.bond_x)
            r *= np.exp(E[self.bond] * self.tilt_sign / (2 * self.N))
        return r

    def rates_batch(self, drive: DriveSchedule, ts: np.ndarray) -> np.ndarray:
        """``rates`` at several times at once, shape ``(len(ts), n_moves)``."""
        al = np.array([drive.alphas(t) for t in ts])
        a0, a1 = al[:, :1], al[:, 1:]
        c = np.zeros((len(ts), self.n_moves))
        for coef, factors in self.terms:
            term = np.full((len(ts), self.n_moves), coef)
            for vals, on_left, on_right in factors:
                term *= vals + a0 * on_left + a1 * on_right
            c += term
        r = (self.flip_base + a0 * self.flip0 + a1 * self.flip1) * c
        if drive.has_field:
            E = np.array([drive.field_values(t, self.bond_x) for t in ts])
            r *= np.exp(E[:, self.bond] * self.tilt_sign / (2 * self.N))
        return r

    def transposed(self, rates: np.ndarray, scale: float = 1.0) -> sp.csr_matrix:
        exit_rate = np.bincount(self.src, weights=rates, minlength=self.size)
        data = np.bincount(self.slot, weights=np.concatenate([rates, -exit_rate]) * scale,
                           minlength=self.indices.size)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.size, self.size))


_TABLES: dict[tuple[int, int], tuple[RateModel, _RateTable]] = {}


def _table(model: RateModel, N: int) -> _RateTable:
    key = (id(model), N)
    hit = _TABLES.get(key)
    if hit is None or hit[0] is not model:
        hit = (model, _RateTable(model, N))
        _TABLES[key] = hit
    return hit[1]


def build_generator(model: RateModel, drive: DriveSchedule, t: float, N: int) -> sp.csr_matrix:
    """Rate matrix ``Q[eta, eta']`` of the unaccelerated chain at time ``t``."""
    tab = _table(model, N)
    return tab.transposed(tab.rates(drive, t)).T.tocsr()


def detailed_balance_residual(model: RateModel, drive: DriveSchedule, t: float, N: int,
                              pi: np.ndarray) -> float:
    """``max |pi(a) Q(a,b) - pi(b) Q(b,a)|`` over all edges."""
    Q = build_generator(model, drive, t, N).tocoo()
    off = Q.row != Q.col
    flux = sp.csr_matrix((pi[Q.row[off]] * Q.data[off], (Q.row[off], Q.col[off])), shape=Q.shape)
    diff = flux - flux.T
    return float(np.max(np.abs(diff.data))) if diff.nnz else 0.0


# ----------------------------------------------------------------------------
# Stationary state


def stationary_state(model: RateModel, drive: DriveSchedule, t: float, N: int) -> np.ndarray:
    """Normalized kernel vector of ``Q(t)^T``."""
    QT = build_generator(model, drive, t, N).T.tocsr()
    size = QT.shape[0]
    A = QT.tolil()
    A[0, :] = np.ones(size)
    rhs = np.zeros(size)
    rhs[0] = 1.0
    try:
        p = spsolve(A.tocsc(), rhs)
    except Exception as exc:  # scipy raises several types for singular systems
        raise SolverError(f"stationary solve failed: {exc}") from exc
    if not np.all(np.isfinite(p)):
        raise SolverError("stationary solve produced non-finite entries (generator reducible?)")
    if p.min() < -1e-10:
        raise SolverError(f"stationary vector has negative mass {p.min():.3e}")
    p = np.clip(p, 0.0, None)
    p /= p.sum()
    res = float(np.max(np.abs(QT @ p)))
    scale = max(1.0, float(np.max(np.abs(QT.diagonal()))))
    if res > 1e-12 * scale:
        raise SolverError(f"stationary residual {res:.3e} above tolerance")
    return p


# ----------------------------------------------------------------------------
# Forward evolution by uniformization


@njit(cache=True)
def _propagate(p, rates, durations, theta, src, slot, indices, indptr, n_slots, tail, max_chunk):
    """Apply ``exp(d_s theta Q_s^T)`` for each row ``s`` of ``rates`` by uniformization.

    ``Q_s^T`` is assembled in CSR form from the move rates through ``slot``;
    the Poisson weights are truncated at ``tail`` and renormalized.
    """
    size = p.size
    n_moves = src.size
    data = np.empty(n_slots)
    exit_rate = np.empty(size)
    wbuf = np.empty(int(12 * max_chunk) + 200)
    term = np.empty(size)
    nxt = np.empty(size)
    acc = np.empty(size)
    for s in range(rates.shape[0]):
        exit_rate[:] = 0.0
        data[:] = 0.0
        for m in range(n_moves):
            r = rates[s, m] * theta
            exit_rate[src[m]] += r
            data[slot[m]] += r
        lam = 0.0
        for i in range(size):
            data[slot[n_moves + i]] -= exit_rate[i]
            if exit_rate[i] > lam:
                lam = exit_rate[i]
        dur = durations[s]
        if lam <= 0.0 or dur <= 0.0:
            continue
        n_chunks = max(1, int(math.ceil(lam * dur / max_chunk)))
        a = lam * dur / n_chunks
        w = math.exp(-a)
        wbuf[0] = w
        cum = w
        K = 1
        while (1.0 - cum > tail or K <= a) and K < wbuf.size:
            w = w * a / K
            wbuf[K] = w
            cum += w
            K += 1
        total = 0.0
        for k in range(K):
            total += wbuf[k]
        for _ in range(n_chunks):
            for i in range(size):
                term[i] = p[i]
                acc[i] = wbuf[0] / total * p[i]
            for k in range(1, K):
                for i in range(size):
                    v = 0.0
                    for q in range(indptr[i], indptr[i + 1]):
                        v += data[q] * term[indices[q]]
                    nxt[i] = term[i] + v / lam
                wk = wbuf[k] / total
                for i in range(size):
                    term[i] = nxt[i]
                    acc[i] += wk * nxt[i]
            for i in range(size):
                p[i] = acc[i]
    return p


def _drive_signature(drive: DriveSchedule, t: float, N: int) -> np.ndarray:
    xs = np.arange(N + 1) / N
    return np.concatenate([drive.alphas(t), drive.field_values(t, xs)])


def _pieces(drive: DriveSchedule, N: int, t0: float, t1: float, tol: float) -> list[tuple[float, float, bool]]:
    """Split ``[t0, t1]`` so the drive moves by at most ``tol`` (relative) on each piece.

    Each piece carries a flag telling whether the drive is unchanged on it.
    """
    pieces = []
    t = t0
    h = t1 - t0
    sig = _drive_signature(drive, t, N)
    while t < t1:
        h = min(h, t1 - t)
        while True:
            nxt = _drive_signature(drive, t + h, N)
            mid = _drive_signature(drive, t + 0.5 * h, N)
            scale = max(float(np.max(np.abs(sig))), 1e-12)
            change = max(float(np.max(np.abs(nxt - sig))), float(np.max(np.abs(mid - sig)))) / scale
            if change <= tol:
                break
            h *= 0.5
            if h < MIN_SUBSTEP * max(1.0, abs(t1)):
                raise SolverError(
                    f"drive changes by {change:.3e} over a sub-interval of {h:.3e} at t={t:.6g}; "
                    f"relative tolerance {tol:g} not reachable above the step floor"
                )
        end = t1 if t1 - (t + h) < 1e-14 * max(1.0, abs(t1)) else t + h
        pieces.append((t, end, change == 0.0))
        t = end
        sig = nxt
        if change < 0.25 * tol:
            h *= 2.0
    return pieces


@dataclass
class Trajectory:
    times: np.ndarray
    probabilities: np.ndarray

    def occupation(self, N: int) -> np.ndarray:
        """Site occupation probabilities, shape ``(n_times, N-1)``."""
        return self.probabilities @ _moves(N).occ.astype(float)


def report_times(t0: float, T: float, dt_report: float) -> np.ndarray:
    if not dt_report > 0 or not T >= t0:
        raise ValidationError("need dt_report > 0 and T >= t0")
    n = int(math.floor((T - t0) / dt_report + 1e-9))
    times = t0 + dt_report * np.arange(n + 1)
    if T - times[-1] > 1e-12 * max(1.0, abs(T)):
        times = np.append(times, T)
    return times


def evolve_forward(p0: np.ndarray, model: RateModel, drive: DriveSchedule, theta: float, T: float,
                   dt_report: float, N: int | None = None, t0: float = 0.0,
                   drive_tol: float = DRIVE_TOL) -> Trajectory:
    """Integrate ``dp/dt = theta Q(t)^T p`` from ``t0`` to ``T``.

    The generator is frozen at the midpoint of sub-intervals over which the
    drive moves by less than ``drive_tol`` and which carry at most
    ``FROZEN_JUMPS`` expected jumps, and propagated exactly there.
    """
    p = np.asarray(p0, dtype=float).copy()
    n = int(round(math.log2(p.size))) if p.size else 0
    N = n + 1 if N is None else N
    _check_capacity(N)
    if p.shape != (1 << (N - 1),):
        raise ValidationError(f"probability vector has shape {p.shape}, expected ({1 << (N - 1)},)")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValidationError("initial law must be a normalized nonnegative vector")
    if not theta > 0:
        raise ValidationError("speed-up must be positive")
    times = report_times(t0, T, dt_report)
    out = np.empty((times.size, p.size))
    out[0] = p
    tab = _table(model, N)
    for i in range(1, times.size):
        # frozen pieces must also be short against the fastest exit rate
        exit_max = max(
            float(np.max(np.bincount(tab.src, weights=tab.rates(drive, s), minlength=tab.size)))
            for s in (times[i - 1], 0.5 * (times[i - 1] + times[i]), times[i])
        )
        max_step = FROZEN_JUMPS / (theta * 1.05 * exit_max) if exit_max > 0 else math.inf
        for a, b, constant in _pieces(drive, N, times[i - 1], times[i], drive_tol):
            n = 1 if constant else max(1, math.ceil((b - a) / max_step))
            edges = np.linspace(a, b, n + 1)
            for lo in range(0, n, BATCH):
                e = edges[lo : lo + BATCH + 1]
                rates = tab.rates_batch(drive, 0.5 * (e[:-1] + e[1:]))
                p = _propagate(p, rates, np.diff(e), float(theta), tab.src, tab.slot, tab.indices,
                               tab.indptr, tab.indices.size, POISSON_TAIL, MAX_CHUNK_MEAN)
        if p.min() < -1e-12:
            raise SolverError(f"negative probability {p.min():.3e} at t={times[i]:.6g}")
        p = np.clip(p, 0.0, None)
        mass = p.sum()
        if abs(mass - 1.0) > 1e-10:
            raise SolverError(f"mass drifted to {mass!r} at t={times[i]:.6g}")
        # the propagator is exactly stochastic; what is left is rounding
        p = p / mass
        out[i] = p
    return Trajectory(times, out)


# ----------------------------------------------------------------------------
# Entropy along the exact evolution


@dataclass
class EntropyTrajectory:
    times: np.ndarray
    H: np.ndarray
    H_norm: np.ndarray

    def rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.times.tolist(), self.H.tolist(), self.H_norm.tolist()))


def entropy_trajectory(p0: np.ndarray, model: RateModel, drive: DriveSchedule, theta: float,
                       profile: Callable[[float], np.ndarray] | np.ndarray, T: float, dt_report: float,
                       N: int | None = None, t0: float = 0.0) -> EntropyTrajectory:
    """Relative entropy of the exact law w.r.t. the product measure at ``profile``.

    ``profile`` is either ``profile(t) -> densities at sites 1..N-1`` or an
    array with one row per report time. The normalization is ``N eps^2``
    with ``eps = drive.epsilon``.
    """
    traj = evolve_forward(p0, model, drive, theta, T, dt_report, N=N, t0=t0)
    N = traj.probabilities.shape[1].bit_length()
    if callable(profile):
        rows = [np.asarray(profile(t), dtype=float) for t in traj.times]
    else:
        rows = list(np.asarray(profile, dtype=float))
        if len(rows) != traj.times.size:
            raise ValidationError(f"profile has {len(rows)} rows for {traj.times.size} report times")
    H = np.array([max(0.0, relative_entropy_general(p / p.sum(), ProductMeasure(g)))
                  for p, g in zip(traj.probabilities, rows)])
    return EntropyTrajectory(traj.times, H, H / (N * drive.epsilon**2))
