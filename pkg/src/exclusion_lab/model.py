"""Lattice configurations, cylinder functions and boundary-driven gradient rates.

Sites of the open lattice are ``1, ..., N-1``. Bonds are numbered ``0..N-1``:
bond 0 flips site 1 against the left reservoir, bond ``N-1`` flips site
``N-1`` against the right reservoir, and bond ``j`` in between exchanges
sites ``j`` and ``j+1``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ValidationError


def logistic(lam):
    """Density associated with a chemical potential, ``e^l / (1 + e^l)``."""
    return 1.0 / (1.0 + np.exp(-lam)) if isinstance(lam, np.ndarray) else 1.0 / (1.0 + math.exp(-lam))


def logit(theta):
    return np.log(theta / (1.0 - theta)) if isinstance(theta, np.ndarray) else math.log(theta / (1.0 - theta))


# ----------------------------------------------------------------------------
# Configurations


@dataclass
class Configuration:
    """Occupancy of sites ``1..N-1``; ``occ[j-1]`` holds eta(j)."""

    N: int
    occ: np.ndarray

    def __post_init__(self):
        if self.N < 2:
            raise ValidationError(f"lattice needs N >= 2, got {self.N}")
        occ = np.asarray(self.occ)
        if occ.shape != (self.N - 1,):
            raise ValidationError(f"expected {self.N - 1} occupation values, got shape {occ.shape}")
        if not np.all((occ == 0) | (occ == 1)):
            raise ValidationError("occupation values must be 0 or 1")
        self.occ = occ.astype(np.uint8)

    @classmethod
    def empty(cls, N: int) -> "Configuration":
        return cls(N, np.zeros(N - 1, dtype=np.uint8))

    @classmethod
    def from_sites(cls, N: int, occupied: Iterable[int]) -> "Configuration":
        occ = np.zeros(N - 1, dtype=np.uint8)
        for j in occupied:
            if not 1 <= j <= N - 1:
                raise ValidationError(f"site {j} outside 1..{N - 1}")
            occ[j - 1] = 1
        return cls(N, occ)

    def __getitem__(self, j: int) -> int:
        if not 1 <= j <= self.N - 1:
            raise IndexError(f"site {j} outside 1..{self.N - 1}")
        return int(self.occ[j - 1])

    def __eq__(self, other):
        return isinstance(other, Configuration) and self.N == other.N and np.array_equal(self.occ, other.occ)

    def copy(self) -> "Configuration":
        return Configuration(self.N, self.occ.copy())

    @property
    def n_particles(self) -> int:
        return int(self.occ.sum())

    def index(self) -> int:
        """Integer key with bit ``j-1`` set when site ``j`` is occupied."""
        return int(np.dot(self.occ.astype(np.int64), 1 << np.arange(self.N - 1, dtype=np.int64)))


def all_configurations(n_sites: int) -> np.ndarray:
    """Occupancy table of shape ``(2**n_sites, n_sites)`` in integer-key order."""
    keys = np.arange(1 << n_sites, dtype=np.int64)
    return ((keys[:, None] >> np.arange(n_sites)) & 1).astype(np.uint8)


# ----------------------------------------------------------------------------
# Cylinder functions


def _norm_terms(terms) -> dict[tuple[int, ...], float]:
    items = terms.items() if isinstance(terms, Mapping) else terms
    out: dict[tuple[int, ...], float] = {}
    for sites, coef in items:
        key = tuple(sorted(set(int(s) for s in sites)))
        out[key] = out.get(key, 0.0) + float(coef)
    return {k: v for k, v in out.items() if v != 0.0}


class CylinderFunction:
    """Multilinear local function ``sum_A c_A prod_{k in A} eta(k)``.

    ``terms`` maps tuples of relative offsets to coefficients; the empty tuple
    is the constant term. Because the representation is multilinear it can be
    evaluated at fractional occupancies, which is how reservoir densities are
    substituted and how product-measure expectations are taken.
    """

    __slots__ = ("terms",)

    def __init__(self, terms=()):
        self.terms = _norm_terms(terms)

    @classmethod
    def constant(cls, value: float) -> "CylinderFunction":
        return cls({(): value})

    @classmethod
    def occupation(cls, k: int) -> "CylinderFunction":
        return cls({(k,): 1.0})

    def __repr__(self):
        parts = []
        for sites, c in sorted(self.terms.items(), key=lambda kv: (len(kv[0]), kv[0])):
            mono = "".join(f"eta({k})" for k in sites) or "1"
            parts.append(f"{c:+g}*{mono}")
        return f"CylinderFunction({' '.join(parts) or '0'})"

    def __eq__(self, other):
        return isinstance(other, CylinderFunction) and self.terms == other.terms

    def __hash__(self):
        return hash(frozenset(self.terms.items()))

    @property
    def window(self) -> tuple[int, ...]:
        return tuple(sorted(set(itertools.chain.from_iterable(self.terms))))

    def __call__(self, x: Callable[[int], float] | Mapping[int, float]) -> float:
        get = x.__getitem__ if isinstance(x, Mapping) else x
        total = 0.0
        for sites, c in self.terms.items():
            prod = c
            for k in sites:
                prod *= get(k)
            total += prod
        return total

    def shift(self, j: int) -> "CylinderFunction":
        """Translate: ``(tau_j f)(eta) = f(tau_j eta)`` with ``(tau_j eta)(k) = eta(k+j)``."""
        return CylinderFunction({tuple(k + j for k in s): c for s, c in self.terms.items()})

    def __add__(self, other):
        if not isinstance(other, CylinderFunction):
            other = CylinderFunction.constant(other)
        return CylinderFunction(list(self.terms.items()) + list(other.terms.items()))

    __radd__ = __add__

    def __neg__(self):
        return CylinderFunction({s: -c for s, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-other if isinstance(other, CylinderFunction) else -other)

    def __mul__(self, other):
        if isinstance(other, CylinderFunction):
            # eta(k)^2 = eta(k) on {0,1}; keeps the product multilinear
            return CylinderFunction(
                [(a + b, ca * cb) for a, ca in self.terms.items() for b, cb in other.terms.items()]
            )
        return CylinderFunction({s: c * other for s, c in self.terms.items()})

    __rmul__ = __mul__

    def hat_coefficients(self) -> np.ndarray:
        """Power-series coefficients of ``theta -> E_{nu_theta}[f]``."""
        deg = max((len(s) for s in self.terms), default=0)
        coefs = np.zeros(deg + 1)
        for s, c in self.terms.items():
            coefs[len(s)] += c
        return coefs


def evaluate_extended(f: CylinderFunction, eta: Configuration, j: int, alpha0: float, alpha1: float) -> float:
    """``f(tau^{N,lambda}_j eta)``: off-lattice sites read the reservoir densities."""
    N = eta.N
    occ = eta.occ

    def x(k):
        i = j + k
        if i <= 0:
            return alpha0
        if i >= N:
            return alpha1
        return float(occ[i - 1])

    return f(x)


# ----------------------------------------------------------------------------
# Gradient decomposition and rate model


@dataclass(frozen=True)
class GradientTerm:
    mu: dict[int, float]
    h: CylinderFunction

    @property
    def first_moment(self) -> float:
        return sum(k * w for k, w in self.mu.items())


@dataclass(frozen=True)
class GradientDecomposition:
    terms: tuple[GradientTerm, ...]

    def __post_init__(self):
        for a, term in enumerate(self.terms):
            mass = sum(Fraction(w) for w in term.mu.values())
            if mass != 0:
                raise ValidationError(f"measure mu_{a + 1} has total mass {float(mass)}, expected 0")

    @property
    def moments(self) -> tuple[float, ...]:
        return tuple(t.first_moment for t in self.terms)

    def current_function(self) -> CylinderFunction:
        """``h = sum_a m_a h_a``, whose hat-derivative is the diffusivity."""
        h = CylinderFunction()
        for t in self.terms:
            h = h + t.first_moment * t.h
        return h

    def current_expansion(self) -> CylinderFunction:
        """Right-hand side ``sum_a sum_j mu_a(j) tau_{-j} h_a`` as a cylinder function."""
        out = CylinderFunction()
        for t in self.terms:
            for j, w in t.mu.items():
                out = out + w * t.h.shift(-j)
        return out

    @property
    def window(self) -> tuple[int, ...]:
        sites = set()
        for t in self.terms:
            for j in t.mu:
                sites.update(k - j for k in t.h.window)
        return tuple(sorted(sites))


@dataclass(frozen=True)
class RateModel:
    c: CylinderFunction
    decomposition: GradientDecomposition
    name: str = "custom"
    c_max: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = self.c.window
        if {0, 1} & set(w):
            raise ValidationError("the exchange rate may not depend on eta(0) or eta(1)")
        values = [self.c(dict(zip(w, bits))) for bits in itertools.product((0.0, 1.0), repeat=len(w))]
        if min(values) <= 0.0:
            raise ValidationError(f"rate must be strictly positive, minimum over window is {min(values)}")
        # multilinear: the max over the unit cube is attained at a vertex
        object.__setattr__(self, "c_max", max(values))

    @property
    def window(self) -> tuple[int, ...]:
        return self.c.window


def gradient_residual(model: RateModel) -> Fraction:
    """Largest |LHS - RHS| of the gradient identity over all window configurations.

    Computed in exact rational arithmetic (floats convert to ``Fraction``
    exactly), using full-lattice translations.
    """
    lhs_f = (CylinderFunction.occupation(0) - CylinderFunction.occupation(1)) * model.c
    rhs_f = model.decomposition.current_expansion()
    sites = sorted(set(lhs_f.window) | set(rhs_f.window) | {0, 1})
    lhs_terms = [(s, Fraction(c)) for s, c in lhs_f.terms.items()]
    rhs_terms = [(s, Fraction(c)) for s, c in rhs_f.terms.items()]

    def ev(terms, occ):
        return sum((c for s, c in terms if all(occ[k] for k in s)), Fraction(0))

    worst = Fraction(0)
    for bits in itertools.product((0, 1), repeat=len(sites)):
        occ = dict(zip(sites, bits))
        worst = max(worst, abs(ev(lhs_terms, occ) - ev(rhs_terms, occ)))
    return worst


def verify_gradient(model: RateModel) -> bool:
    return gradient_residual(model) == 0


# ----------------------------------------------------------------------------
# Presets and loading


def _decomp(*pairs) -> GradientDecomposition:
    return GradientDecomposition(tuple(GradientTerm(dict(mu), h) for mu, h in pairs))


def ssep() -> RateModel:
    eta = CylinderFunction.occupation
    return RateModel(CylinderFunction.constant(1.0), _decomp(({0: 1.0, -1: -1.0}, eta(0))), name="ssep")


def paper_example() -> RateModel:
    """``c = 1 + eta(-1) + eta(2)`` with a decomposition valid for ``tau_{-j}``."""
    eta = CylinderFunction.occupation
    c = CylinderFunction({(): 1.0, (-1,): 1.0, (2,): 1.0})
    return RateModel(
        c,
        _decomp(
            ({0: 1.0, -2: -1.0}, eta(-1) * eta(0)),
            ({0: 1.0, 1: -1.0}, eta(0) * eta(2)),
            ({0: 1.0, -1: -1.0}, eta(0)),
        ),
        name="paper-example",
    )


PRESETS = {"ssep": ssep, "paper-example": paper_example}


def preset(name: str) -> RateModel:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValidationError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None


def _terms_from_spec(spec, what) -> CylinderFunction:
    if not isinstance(spec, list):
        raise ValidationError(f"{what}: expected a list of {{sites, coef}} terms")
    terms = []
    for item in spec:
        if not isinstance(item, Mapping) or set(item) - {"sites", "coef"} or "coef" not in item:
            raise ValidationError(f"{what}: each term needs 'coef' and optional 'sites', got {item!r}")
        terms.append((item.get("sites", []), item["coef"]))
    return CylinderFunction(terms)


def rate_model_from_dict(spec: Mapping) -> RateModel:
    """Build a model from ``{preset: name}`` or an explicit description::

        rate: [{sites: [], coef: 1.0}, {sites: [-1], coef: 1.0}]
        decomposition:
          - h: [{sites: [0], coef: 1.0}]
            mu: [[0, 1.0], [-1, -1.0]]
    """
    allowed = {"preset", "rate", "decomposition", "name"}
    unknown = set(spec) - allowed
    if unknown:
        raise ValidationError(f"unknown model keys: {sorted(unknown)}")
    if "preset" in spec:
        if set(spec) - {"preset"}:
            raise ValidationError("'preset' cannot be combined with an explicit rate description")
        return preset(spec["preset"])
    for key in ("rate", "decomposition"):
        if key not in spec:
            raise ValidationError(f"model description is missing required key '{key}'")
    c = _terms_from_spec(spec["rate"], "rate")
    pairs = []
    for a, item in enumerate(spec["decomposition"]):
        if not isinstance(item, Mapping) or set(item) != {"h", "mu"}:
            raise ValidationError(f"decomposition entry {a + 1} needs exactly keys 'h' and 'mu'")
        mu = {}
        for site, weight in item["mu"]:
            mu[int(site)] = mu.get(int(site), 0.0) + float(weight)
        pairs.append((mu, _terms_from_spec(item["h"], f"h_{a + 1}")))
    return RateModel(c, _decomp(*pairs), name=str(spec.get("name", "custom")))


def rate_model_to_dict(model: RateModel) -> dict:
    def terms(f):
        return [{"sites": list(s), "coef": c} for s, c in sorted(f.terms.items())]

    return {
        "name": model.name,
        "rate": terms(model.c),
        "decomposition": [
            {"h": terms(t.h), "mu": [[k, w] for k, w in sorted(t.mu.items())]}
            for t in model.decomposition.terms
        ],
    }


# ----------------------------------------------------------------------------
# Drive


def _zero_field(t, x):
    return 0.0


@dataclass(frozen=True)
class DriveSchedule:
    """Time-dependent reservoirs and field, plus the two scale parameters.

    ``lambda0``/``lambda1`` are chemical potentials as functions of
    macroscopic time; ``field(t, x)`` is the external field (``None`` means
    identically zero). ``epsilon`` and ``ell`` are the correction and
    speed-up scales. ``field_bound``, when given, is a promise that
    ``|field| <= field_bound`` on the simulated time window.
    """

    lambda0: Callable[[float], float]
    lambda1: Callable[[float], float]
    field: Callable[[float, float], float] | None = None
    epsilon: float = 1.0
    ell: float = 1.0
    field_bound: float | None = None

    def __post_init__(self):
        if not self.epsilon > 0 or not self.ell > 0:
            raise ValidationError("epsilon and ell must be positive")

    @classmethod
    def constant(cls, alpha0: float, alpha1: float | None = None, field=None, **kw) -> "DriveSchedule":
        alpha1 = alpha0 if alpha1 is None else alpha1
        for a in (alpha0, alpha1):
            if not 0.0 < a < 1.0:
                raise ValidationError(f"boundary density {a} outside (0,1)")
        l0, l1 = logit(alpha0), logit(alpha1)
        return cls(lambda t: l0, lambda t: l1, field, **kw)

    @classmethod
    def from_alpha(cls, alpha0, alpha1=None, field=None, **kw) -> "DriveSchedule":
        """Drive given through boundary densities ``alpha_a(t)`` instead of potentials."""
        from ._jit import maybe_njit

        a0 = maybe_njit(alpha0)
        a1 = a0 if alpha1 is None else maybe_njit(alpha1)

        def lam0(t):
            a = a0(t)
            return math.log(a / (1.0 - a))

        def lam1(t):
            a = a1(t)
            return math.log(a / (1.0 - a))

        return cls(lam0, lam1, field, **kw)

    def alpha0(self, t: float) -> float:
        return logistic(self.lambda0(t))

    def alpha1(self, t: float) -> float:
        return logistic(self.lambda1(t))

    def alphas(self, t: float) -> tuple[float, float]:
        return self.alpha0(t), self.alpha1(t)

    def E(self, t: float, x: float) -> float:
        return 0.0 if self.field is None else float(self.field(t, x))

    def field_values(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.field is None:
            return np.zeros_like(x)
        try:
            out = np.asarray(self.field(t, x), dtype=float)
            if out.shape == x.shape:
                return out
            return np.broadcast_to(out, x.shape).copy()
        except TypeError:
            return np.array([self.field(t, float(xi)) for xi in x.ravel()]).reshape(x.shape)

    @property
    def has_field(self) -> bool:
        return self.field is not None


# ----------------------------------------------------------------------------
# Rates and moves


def _tilt(N: int, E: float, d: float) -> float:
    return math.exp(E * d / (2.0 * N))


def bulk_rate(model: RateModel, drive: DriveSchedule, t: float, j: int, eta: Configuration) -> float:
    N = eta.N
    if not 1 <= j <= N - 2:
        raise IndexError(f"bulk bond {j} outside 1..{N - 2}")
    a0, a1 = drive.alphas(t)
    d = eta[j] - eta[j + 1]
    tilt = _tilt(N, drive.E(t, j / N), d) if d else 1.0
    return tilt * evaluate_extended(model.c, eta, j, a0, a1)


def boundary_rate(model: RateModel, drive: DriveSchedule, t: float, side: str, eta: Configuration) -> float:
    """Flip rate of eta(1) (``side='left'``) or eta(N-1) (``side='right'``)."""
    N = eta.N
    a0, a1 = drive.alphas(t)
    if side == "left":
        s = eta[1]
        r = a0 * (1 - s) + s * (1 - a0)
        return r * _tilt(N, drive.E(t, 0.0), 1 - 2 * s) * evaluate_extended(model.c, eta, 0, a0, a1)
    if side == "right":
        s = eta[N - 1]
        r = a1 * (1 - s) + s * (1 - a1)
        return r * _tilt(N, -drive.E(t, 1.0), 1 - 2 * s) * evaluate_extended(model.c, eta, N - 1, a0, a1)
    raise ValidationError(f"side must be 'left' or 'right', got {side!r}")


def bond_rate(model: RateModel, drive: DriveSchedule, t: float, bond: int, eta: Configuration) -> float:
    """Rate of the move on ``bond`` (0 and N-1 are the reservoir flips)."""
    N = eta.N
    if bond == 0:
        return boundary_rate(model, drive, t, "left", eta)
    if bond == N - 1:
        return boundary_rate(model, drive, t, "right", eta)
    return bulk_rate(model, drive, t, bond, eta)


def apply_move(eta: Configuration, bond: int) -> Configuration:
    """Return the configuration after the move on ``bond``.

    Bond 0 flips site 1, bond ``N-1`` flips site ``N-1``, any other bond
    ``j`` swaps sites ``j`` and ``j+1``.
    """
    N = eta.N
    if not 0 <= bond <= N - 1:
        raise IndexError(f"bond {bond} outside 0..{N - 1}")
    occ = eta.occ.copy()
    if bond == 0:
        occ[0] ^= 1
    elif bond == N - 1:
        occ[N - 2] ^= 1
    else:
        occ[bond - 1], occ[bond] = occ[bond], occ[bond - 1]
    return Configuration(N, occ)
