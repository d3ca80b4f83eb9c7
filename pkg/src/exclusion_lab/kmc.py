"""Event-driven simulation of the speeded-up boundary-driven exclusion process.

Time-dependent rates are sampled exactly by thinning. Each bond carries an
upper bound on its rate that depends on the configuration but not on time:

* reservoir densities entering a rate are bounded by the whole range [0,1],
* the weak-asymmetry tilt by ``exp(sup|E| / 2N)``,
* an exchange between two equal occupations is a no-op and gets bound 0.

Because the bounds do not move in time, proposals form a Poisson process
whose intensity only changes at accepted events, and no lookahead or bound
refresh is required. A proposal on bond ``b`` at time ``t`` is accepted with
probability ``rate_b(t) / bound_b``; a ratio above one aborts the run.

Two interchangeable selectors are provided. ``"tree"`` keeps the bounds in a
Fenwick tree (logarithmic selection, updates touch only the bonds whose
window contains a changed site). ``"uniform"`` uses one configuration-free
bound for every bond and picks bonds uniformly; it rejects more but each
proposal is cheaper.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numba import njit

from ._jit import is_jitted, maybe_njit
from .errors import RateBoundError, ValidationError
from .measures import ProductMeasure, sample
from .model import Configuration, DriveSchedule, RateModel, _zero_field

log = logging.getLogger(__name__)

REBUILD_EVERY = 1 << 20
_STATUS_OK, _STATUS_BOUND, _STATUS_MAX_EVENTS, _STATUS_INVARIANT = 0, 1, 2, 3


def _build_kernels(jit: bool):
    """Compile (or not) one copy of the kernels; identical source for both."""
    # Hot helpers are inlined: an out-of-line numba call pays refcount traffic
    # on every array argument. The rarely taken edge path stays out of line so
    # it does not bloat the main loop.
    wrap = njit(nogil=True, inline="always") if jit else (lambda f: f)
    entry = njit(nogil=True) if jit else (lambda f: f)

    @wrap
    def logistic(lam):
        return 1.0 / (1.0 + math.exp(-lam))

    @wrap
    def c_ext(eta, N, b, c_off, c_len, c_coef, a0, a1):
        total = 0.0
        for m in range(c_coef.shape[0]):
            prod = c_coef[m]
            for q in range(c_len[m]):
                i = b + c_off[m, q]
                if i <= 0:
                    prod *= a0
                elif i >= N:
                    prod *= a1
                else:
                    prod *= eta[i]
            total += prod
        return total

    @wrap
    def c_upper(eta, N, b, c_off, c_len, c_coef):
        # reservoir sites range over [0,1]; the product is monotone in each factor
        total = 0.0
        for m in range(c_coef.shape[0]):
            prod = c_coef[m]
            for q in range(c_len[m]):
                i = b + c_off[m, q]
                if i <= 0 or i >= N:
                    if prod < 0.0:
                        prod = 0.0
                else:
                    prod *= eta[i]
            total += prod
        return total

    @wrap
    def bound(eta, N, b, c_off, c_len, c_coef, tilt_bound):
        if 0 < b < N - 1 and eta[b] == eta[b + 1]:
            return 0.0
        return c_upper(eta, N, b, c_off, c_len, c_coef) * tilt_bound

    @wrap
    def bulk_rate(eta, N, b, t, c_off, c_len, c_coef, efield, has_field):
        # interior bond whose whole window lies on the lattice
        d = eta[b] - eta[b + 1]
        if d == 0:
            return 0.0
        c = c_ext(eta, N, b, c_off, c_len, c_coef, 0.0, 0.0)
        if has_field:
            c *= math.exp(efield(t, b / N) * d / (2.0 * N))
        return c

    @entry
    def edge_rate(eta, N, b, t, c_off, c_len, c_coef, wmin, wmax, lam0, lam1, efield, has_field):
        a0 = 0.0
        a1 = 0.0
        if b + wmin <= 0 or b == 0:
            a0 = logistic(lam0(t))
        if b + wmax >= N or b == N - 1:
            a1 = logistic(lam1(t))
        c = c_ext(eta, N, b, c_off, c_len, c_coef, a0, a1)
        if b == 0:
            s = eta[1]
            r = a0 if s == 0 else 1.0 - a0
            if has_field:
                r *= math.exp(efield(t, 0.0) * (1 - 2 * s) / (2.0 * N))
            return r * c
        if b == N - 1:
            s = eta[N - 1]
            r = a1 if s == 0 else 1.0 - a1
            if has_field:
                r *= math.exp(-efield(t, 1.0) * (1 - 2 * s) / (2.0 * N))
            return r * c
        d = eta[b] - eta[b + 1]
        if d == 0:
            return 0.0
        if has_field:
            c *= math.exp(efield(t, b / N) * d / (2.0 * N))
        return c

    @wrap
    def apply(eta, N, b):
        if b == 0:
            eta[1] = 1 - eta[1]
        elif b == N - 1:
            eta[N - 1] = 1 - eta[N - 1]
        else:
            tmp = eta[b]
            eta[b] = eta[b + 1]
            eta[b + 1] = tmp

    @wrap
    def fen_build(tree, w):
        n = w.shape[0]
        tree[:] = 0.0
        for i in range(n):
            k = i + 1
            tree[k] += w[i]
            p = k + (k & -k)
            if p <= n:
                tree[p] += tree[k]

    @wrap
    def fen_add(tree, n, i, delta):
        k = i + 1
        while k <= n:
            tree[k] += delta
            k += k & -k

    @wrap
    def fen_find(tree, n, u):
        pos = 0
        step = 1
        while step * 2 <= n:
            step *= 2
        while step > 0:
            nxt = pos + step
            if nxt <= n and tree[nxt] <= u:
                pos = nxt
                u -= tree[nxt]
            step //= 2
        if pos >= n:
            pos = n - 1
        return pos

    @wrap
    def check_move(eta, N, b, before):
        after = 0
        for i in range(1, N):
            after += eta[i]
        if b == 0 or b == N - 1:
            return abs(after - before) == 1
        return after == before

    @entry
    def run_tree(eta, N, theta, t0, checkpoints, snaps, rng, c_off, c_len, c_coef, wmin, wmax,
                 lam0, lam1, efield, has_field, tilt_bound, max_events, debug):
        dmin = min(0, wmin)
        dmax = max(1, wmax)
        w = np.zeros(N)
        tree = np.zeros(N + 1)
        for b in range(N):
            w[b] = bound(eta, N, b, c_off, c_len, c_coef, tilt_bound)
        fen_build(tree, w)
        total = w.sum()
        t = t0
        ck = 0
        n_ck = checkpoints.shape[0]
        events = 0
        proposals = 0
        status = _STATUS_OK
        fail_bond = -1
        while ck < n_ck:
            t_new = t + rng.standard_exponential() / (theta * total)
            while ck < n_ck and checkpoints[ck] < t_new:
                for i in range(1, N):
                    snaps[ck, i - 1] = eta[i]
                ck += 1
            if ck == n_ck:
                break
            if debug and not t_new > t:
                status = _STATUS_INVARIANT
                break
            t = t_new
            proposals += 1
            b = fen_find(tree, N, rng.random() * total)
            wb = w[b]
            if wb <= 0.0:
                continue
            if b + wmin > 0 and b + wmax < N and 0 < b < N - 1:
                r = bulk_rate(eta, N, b, t, c_off, c_len, c_coef, efield, has_field)
            else:
                r = edge_rate(eta, N, b, t, c_off, c_len, c_coef, wmin, wmax, lam0, lam1, efield, has_field)
            ratio = r / wb
            if ratio > 1.0 + 1e-12:
                status = _STATUS_BOUND
                fail_bond = b
                break
            if ratio < 1.0 and rng.random() >= ratio:
                continue
            before = 0
            if debug:
                for i in range(1, N):
                    before += eta[i]
            apply(eta, N, b)
            if debug and not check_move(eta, N, b, before):
                status = _STATUS_INVARIANT
                fail_bond = b
                break
            events += 1
            if b == 0:
                lo, hi = 1 - dmax, 1 - dmin
            elif b == N - 1:
                lo, hi = N - 1 - dmax, N - 1 - dmin
            else:
                lo, hi = b - dmax, b + 1 - dmin
            lo = max(lo, 0)
            hi = min(hi, N - 1)
            for i in range(lo, hi + 1):
                nw = bound(eta, N, i, c_off, c_len, c_coef, tilt_bound)
                delta = nw - w[i]
                if delta != 0.0:
                    w[i] = nw
                    fen_add(tree, N, i, delta)
                    total += delta
            if events % REBUILD_EVERY == 0:
                fen_build(tree, w)
                total = w.sum()
            if events >= max_events:
                status = _STATUS_MAX_EVENTS
                break
        return events, proposals, status, t, fail_bond

    @entry
    def run_uniform(eta, N, theta, t0, checkpoints, snaps, rng, c_off, c_len, c_coef, wmin, wmax,
                    lam0, lam1, efield, has_field, tilt_bound, c_max, max_events, debug):
        bnd = c_max * tilt_bound
        total = N * bnd
        t = t0
        ck = 0
        n_ck = checkpoints.shape[0]
        events = 0
        proposals = 0
        status = _STATUS_OK
        fail_bond = -1
        while ck < n_ck:
            t_new = t + rng.standard_exponential() / (theta * total)
            while ck < n_ck and checkpoints[ck] < t_new:
                for i in range(1, N):
                    snaps[ck, i - 1] = eta[i]
                ck += 1
            if ck == n_ck:
                break
            t = t_new
            proposals += 1
            b = int(rng.random() * N)
            if b >= N:
                b = N - 1
            if 0 < b < N - 1 and eta[b] == eta[b + 1]:
                continue
            if b + wmin > 0 and b + wmax < N and 0 < b < N - 1:
                r = bulk_rate(eta, N, b, t, c_off, c_len, c_coef, efield, has_field)
            else:
                r = edge_rate(eta, N, b, t, c_off, c_len, c_coef, wmin, wmax, lam0, lam1, efield, has_field)
            ratio = r / bnd
            if ratio > 1.0 + 1e-12:
                status = _STATUS_BOUND
                fail_bond = b
                break
            if ratio < 1.0 and rng.random() >= ratio:
                continue
            before = 0
            if debug:
                for i in range(1, N):
                    before += eta[i]
            apply(eta, N, b)
            if debug and not check_move(eta, N, b, before):
                status = _STATUS_INVARIANT
                fail_bond = b
                break
            events += 1
            if events >= max_events:
                status = _STATUS_MAX_EVENTS
                break
        return events, proposals, status, t, fail_bond

    return run_tree, run_uniform


_KERNELS: dict[bool, tuple] = {}


def _kernels(jit: bool):
    if jit not in _KERNELS:
        _KERNELS[jit] = _build_kernels(jit)
    return _KERNELS[jit]


_ZERO_FIELD_JIT = maybe_njit(_zero_field, probe=(0.0, 0.0))


@dataclass(frozen=True)
class _CompiledModel:
    c_off: np.ndarray
    c_len: np.ndarray
    c_coef: np.ndarray
    wmin: int
    wmax: int
    c_max: float


def _compile_model(model: RateModel) -> _CompiledModel:
    terms = list(model.c.terms.items())
    width = max((len(s) for s, _ in terms), default=0)
    c_off = np.zeros((len(terms), max(width, 1)), dtype=np.int64)
    c_len = np.zeros(len(terms), dtype=np.int64)
    c_coef = np.zeros(len(terms))
    for m, (sites, coef) in enumerate(terms):
        c_off[m, : len(sites)] = sites
        c_len[m] = len(sites)
        c_coef[m] = coef
    w = model.c.window
    return _CompiledModel(c_off, c_len, c_coef, min(w, default=0), max(w, default=0), model.c_max)


_DRIVE_CACHE: dict[int, tuple] = {}


def _compile_drive(drive: DriveSchedule):
    """Jitted drive callables, or the originals plus ``jit=False`` when numba refuses."""
    key = id(drive)
    hit = _DRIVE_CACHE.get(key)
    if hit is not None and hit[0] is drive:
        return hit[1]
    lam0 = maybe_njit(drive.lambda0)
    lam1 = maybe_njit(drive.lambda1)
    if drive.field is None:
        efield = _ZERO_FIELD_JIT
    else:
        efield = maybe_njit(drive.field, probe=(0.0, 0.0))
    jit = all(is_jitted(f) for f in (lam0, lam1, efield))
    if not jit:
        log.info("drive callables are not numba-compilable; using the pure-Python kernel")
        lam0, lam1 = drive.lambda0, drive.lambda1
        efield = drive.field if drive.field is not None else _zero_field
    out = (lam0, lam1, efield, jit)
    _DRIVE_CACHE[key] = (drive, out)
    return out


def field_sup(drive: DriveSchedule, t0: float, t1: float) -> float:
    """Bound on ``|E|`` over ``[t0, t1] x [0, 1]``.

    Uses ``drive.field_bound`` when supplied, otherwise a padded grid estimate;
    an underestimate surfaces as a ``RateBoundError`` rather than a bias.
    """
    if drive.field is None:
        return 0.0
    if drive.field_bound is not None:
        return float(drive.field_bound)
    ts = np.linspace(t0, max(t1, t0), 257)
    xs = np.linspace(0.0, 1.0, 65)
    sup = max(float(np.max(np.abs(drive.field_values(t, xs)))) for t in ts)
    return 1.05 * sup + 1e-12


# ----------------------------------------------------------------------------
# Public API


def _seed_label(rng: np.random.Generator) -> str:
    seq = getattr(rng.bit_generator, "seed_seq", None)
    if isinstance(seq, np.random.SeedSequence):
        return f"{seq.entropy}/{'.'.join(map(str, seq.spawn_key))}"
    return "unseeded"


@dataclass
class ReplicaResult:
    times: np.ndarray
    snapshots: np.ndarray
    observations: dict[str, np.ndarray]
    seed: str
    n_events: int
    n_proposals: int


def block_density(eta: Configuration | np.ndarray, j: int, k: int) -> float:
    """Occupation average over ``{j-k..j+k}`` clipped to the lattice, divided by ``2k+1``."""
    occ = eta.occ if isinstance(eta, Configuration) else np.asarray(eta)
    N = occ.size + 1
    if not 1 <= j <= N - 1:
        raise IndexError(f"site {j} outside 1..{N - 1}")
    lo, hi = max(1, j - k), min(N - 1, j + k)
    return float(occ[lo - 1 : hi].sum()) / (2 * k + 1)


def block_density_profile(occ: np.ndarray, k: int) -> np.ndarray:
    """``block_density`` at every site ``1..N-1`` for one or many occupancy rows."""
    occ = np.asarray(occ, dtype=np.int64)
    n = occ.shape[-1]
    csum = np.zeros(occ.shape[:-1] + (n + 1,), dtype=np.int64)
    np.cumsum(occ, axis=-1, out=csum[..., 1:])
    j = np.arange(n)
    lo = np.clip(j - k, 0, n)
    hi = np.clip(j + k + 1, 0, n)
    return (csum[..., hi] - csum[..., lo]) / (2 * k + 1)


def run(
    model: RateModel,
    drive: DriveSchedule,
    N: int,
    theta: float,
    initial: Configuration,
    checkpoints,
    observers: Mapping[str, Callable] | None = None,
    rng: np.random.Generator | int | None = None,
    method: str = "tree",
    t0: float = 0.0,
    max_events: int | None = None,
    debug: bool = False,
) -> ReplicaResult:
    """Simulate one path of the chain with generator ``theta * L_N(t)``.

    Records the initial state and the state at each checkpoint; observers
    ``obs(t, occ)`` are evaluated on those records only.
    """
    if initial.N != N:
        raise ValidationError(f"initial configuration has N={initial.N}, expected {N}")
    if not theta > 0:
        raise ValidationError("speed-up must be positive")
    if method not in ("tree", "uniform"):
        raise ValidationError(f"unknown selector {method!r}")
    cks = np.asarray(list(checkpoints), dtype=float)
    if cks.size and (np.any(np.diff(cks) <= 0) or cks[0] < t0):
        raise ValidationError("checkpoints must be strictly increasing and not before t0")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    seed = _seed_label(rng)

    eta = np.zeros(N + 1, dtype=np.int64)
    eta[1:N] = initial.occ
    snaps = np.zeros((cks.size, N - 1), dtype=np.uint8)
    events = proposals = 0
    if cks.size:
        cm = _compile_model(model)
        lam0, lam1, efield, jit = _compile_drive(drive)
        run_tree, run_uniform = _kernels(jit)
        tilt_bound = math.exp(field_sup(drive, t0, float(cks[-1])) / (2.0 * N))
        cap = np.iinfo(np.int64).max if max_events is None else int(max_events)
        common = (eta, N, float(theta), float(t0), cks, snaps, rng, cm.c_off, cm.c_len, cm.c_coef,
                  cm.wmin, cm.wmax, lam0, lam1, efield, drive.has_field, tilt_bound)
        if method == "tree":
            events, proposals, status, t_stop, bad = run_tree(*common, cap, debug)
        else:
            events, proposals, status, t_stop, bad = run_uniform(*common, cm.c_max, cap, debug)
        if status == _STATUS_BOUND:
            raise RateBoundError(f"rate on bond {bad} exceeded its thinning bound at t={t_stop:.6g}")
        if status == _STATUS_INVARIANT:
            raise RuntimeError(f"event invariant violated on bond {bad} at t={t_stop:.6g}")
        if status == _STATUS_MAX_EVENTS:
            raise RuntimeError(f"event budget of {cap} exhausted at t={t_stop:.6g}")

    times = np.concatenate([[t0], cks])
    records = np.vstack([initial.occ[None, :], snaps])
    observations = {}
    for name, obs in (observers or {}).items():
        observations[name] = np.array([np.asarray(obs(t, occ), dtype=float) for t, occ in zip(times, records)])
    return ReplicaResult(times, records, observations, seed, int(events), int(proposals))


@dataclass
class EnsembleSpec:
    """Everything needed to run independent replicas of one experiment.

    ``initial`` is a density profile ``gamma(x)`` (replicas start from the
    product measure with marginals ``gamma(j/N)``), a ``ProductMeasure`` or a
    fixed ``Configuration``.
    """

    model: RateModel
    drive: DriveSchedule
    N: int
    theta: float
    initial: object
    checkpoints: tuple
    observers: dict = field(default_factory=dict)
    method: str = "tree"
    t0: float = 0.0


@dataclass
class EnsembleResult:
    times: np.ndarray
    mean: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    n: int
    seeds: list[str]
    n_events: int
    samples: dict[str, np.ndarray] | None = None


def replica_seeds(base_seed: int, R: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(base_seed).spawn(R)


def _initial_state(spec: EnsembleSpec, rng: np.random.Generator) -> Configuration:
    init = spec.initial
    if isinstance(init, Configuration):
        return init.copy()
    if isinstance(init, ProductMeasure):
        return sample(init, rng)
    if callable(init):
        return sample(ProductMeasure.from_profile(spec.N, init), rng)
    raise ValidationError("initial condition must be a Configuration, ProductMeasure or profile callable")


def _run_replica(spec: EnsembleSpec, seq: np.random.SeedSequence) -> ReplicaResult:
    rng = np.random.default_rng(seq)
    eta0 = _initial_state(spec, rng)
    return run(spec.model, spec.drive, spec.N, spec.theta, eta0, spec.checkpoints, spec.observers,
               rng=rng, method=spec.method, t0=spec.t0)


def default_workers() -> int:
    env = os.environ.get("EXCLUSION_LAB_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def run_ensemble(spec: EnsembleSpec, R: int, base_seed: int, workers: int | None = None,
                 keep_samples: bool = True) -> EnsembleResult:
    """Run ``R`` replicas and reduce them in replica order.

    Replica ``r`` draws its initial state and kernel seed from the ``r``-th
    child of ``SeedSequence(base_seed)``, so results do not depend on the
    number of workers.
    """
    if R < 2:
        raise ValidationError("an ensemble needs at least 2 replicas")
    seqs = replica_seeds(base_seed, R)
    jit = _compile_drive(spec.drive)[3]
    workers = default_workers() if workers is None else workers
    if jit and workers > 1:
        # warm the kernel once so threads do not race on compilation
        first = _run_replica(spec, seqs[0])
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = [first] + list(pool.map(lambda s: _run_replica(spec, s), seqs[1:]))
    else:
        results = [_run_replica(spec, s) for s in seqs]

    names = list(spec.observers)
    samples = {k: np.stack([r.observations[k] for r in results]) for k in names}
    mean = {k: v.mean(axis=0) for k, v in samples.items()}
    stderr = {k: v.std(axis=0, ddof=1) / math.sqrt(R) for k, v in samples.items()}
    return EnsembleResult(
        times=results[0].times,
        mean=mean,
        stderr=stderr,
        n=R,
        seeds=[r.seed for r in results],
        n_events=sum(r.n_events for r in results),
        samples=samples if keep_samples else None,
    )
