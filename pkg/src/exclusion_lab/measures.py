"""Product measures, transport coefficients and relative entropy.

Everything here is exact: expectations under product measures are obtained
by evaluating multilinear cylinder functions at the marginal densities, and
covariances by enumerating window configurations.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

from .errors import CapacityError, ValidationError
from .model import Configuration, CylinderFunction, RateModel, all_configurations, logit

MAX_EXACT_SITES = 20


@dataclass(frozen=True)
class ProductMeasure:
    """Bernoulli product measure on sites ``1..N-1`` with marginals ``gamma``."""

    gamma: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if g.ndim != 1 or g.size == 0:
            raise ValidationError("density profile must be a non-empty vector")
        if np.any(g <= 0.0) or np.any(g >= 1.0):
            raise ValidationError("product-measure densities must lie strictly inside (0,1)")
        object.__setattr__(self, "gamma", g)

    @classmethod
    def homogeneous(cls, N: int, theta: float) -> "ProductMeasure":
        return cls(np.full(N - 1, float(theta)))

    @classmethod
    def from_profile(cls, N: int, profile) -> "ProductMeasure":
        """Marginals ``gamma(j/N)`` for a callable macroscopic profile."""
        x = np.arange(1, N) / N
        return cls(np.array([profile(xi) for xi in x], dtype=float))

    @property
    def N(self) -> int:
        return self.gamma.size + 1

    def probabilities(self) -> np.ndarray:
        """Mass of every configuration, in integer-key order."""
        n = self.gamma.size
        if n > MAX_EXACT_SITES:
            raise CapacityError(f"{n} sites exceed the exact capacity of {MAX_EXACT_SITES}")
        occ = all_configurations(n)
        logp = occ @ np.log(self.gamma) + (1 - occ) @ np.log1p(-self.gamma)
        return np.exp(logp)


# ----------------------------------------------------------------------------
# Expectations


def expectation(f: CylinderFunction, mu: ProductMeasure, j: int, alpha0: float, alpha1: float) -> float:
    """``E_mu[tau^{N,lambda}_j f]`` with reservoir densities off the lattice."""
    N = mu.N
    g = mu.gamma

    def x(k):
        i = j + k
        if i <= 0:
            return alpha0
        if i >= N:
            return alpha1
        return g[i - 1]

    return f(x)


def hat_polynomial(f: CylinderFunction, theta):
    return Polynomial(f.hat_coefficients())(theta)


def hat_prime(f: CylinderFunction, theta):
    return Polynomial(f.hat_coefficients()).deriv()(theta)


def compressibility(theta):
    return theta * (1.0 - theta)


def free_energy(theta):
    return theta * np.log(theta) + (1.0 - theta) * np.log1p(-theta)


def _horner(coef: np.ndarray, x):
    x = np.asarray(x, dtype=float)
    y = np.full_like(x, coef[-1])
    for c in coef[-2::-1]:
        y = y * x + c
    return y if y.ndim else float(y)


@dataclass(frozen=True)
class TransportCoefficients:
    """Diffusivity as a polynomial in the density; the rest follows from it.

    The mobility is ``theta (1-theta) D(theta)`` and the free energy is the
    Bernoulli entropy, so the Einstein relation holds by construction.
    """

    D_poly: Polynomial

    def __post_init__(self):
        # plain coefficient arrays: Horner evaluation is far cheaper than Polynomial.__call__
        c = np.asarray(self.D_poly.coef, dtype=float)
        object.__setattr__(self, "_c", c)
        object.__setattr__(self, "_dc", np.asarray(self.D_poly.deriv().coef, dtype=float))
        object.__setattr__(self, "_ic", np.asarray(self.D_poly.integ().coef, dtype=float))

    @classmethod
    def from_model(cls, model: RateModel) -> "TransportCoefficients":
        return cls(Polynomial(model.c.hat_coefficients()))

    @classmethod
    def constant(cls, D0: float) -> "TransportCoefficients":
        if D0 <= 0:
            raise ValidationError("diffusivity must be positive")
        return cls(Polynomial([float(D0)]))

    def D(self, theta):
        return _horner(self._c, theta)

    def dD(self, theta):
        return _horner(self._dc, theta)

    def chi(self, theta):
        return compressibility(theta) * self.D(theta)

    def dchi(self, theta):
        return (1.0 - 2.0 * theta) * self.D(theta) + compressibility(theta) * self.dD(theta)

    def kirchhoff(self, theta):
        """Antiderivative of ``D`` vanishing at 0."""
        return _horner(self._ic, theta)

    f = staticmethod(free_energy)

    @staticmethod
    def fp(theta):
        return np.log(theta) - np.log1p(-theta)

    @staticmethod
    def fpp(theta):
        return 1.0 / compressibility(theta)

    def einstein_residual(self, theta):
        return self.D(theta) - self.chi(theta) * self.fpp(theta)


def diffusivity(model: RateModel, theta):
    return hat_polynomial(model.c, theta)


def mobility(model: RateModel, theta):
    return compressibility(theta) * hat_polynomial(model.c, theta)


def covariance_with_site(f: CylinderFunction, k: int, theta: float) -> float:
    """``<f ; eta(k)>_theta`` by enumerating the joint window."""
    sites = sorted(set(f.window) | {k})
    ef = efk = 0.0
    for bits in itertools.product((0, 1), repeat=len(sites)):
        occ = dict(zip(sites, bits))
        n1 = sum(bits)
        w = theta**n1 * (1.0 - theta) ** (len(bits) - n1)
        val = f(occ)
        ef += w * val
        efk += w * val * occ[k]
    return efk - ef * theta


def diffusivity_via_covariance(model: RateModel, theta: float) -> float:
    """Diffusivity from the static covariances of ``h = sum_a m_a h_a``."""
    h = model.decomposition.current_function()
    total = sum(covariance_with_site(h, k, theta) for k in h.window)
    return total / compressibility(theta)


# ----------------------------------------------------------------------------
# Relative entropy


def _bernoulli_kl(g, r):
    g, r = np.broadcast_arrays(np.asarray(g, dtype=float), np.asarray(r, dtype=float))
    return r * _phi(g / r) + (1.0 - r) * _phi((1.0 - g) / (1.0 - r))


def relative_entropy_products(mu: ProductMeasure, pi: ProductMeasure) -> float:
    if mu.gamma.shape != pi.gamma.shape:
        raise ValidationError("product measures live on different lattices")
    return float(np.sum(_bernoulli_kl(mu.gamma, pi.gamma)))


def _phi(r: np.ndarray) -> np.ndarray:
    """``r log r - r + 1`` without cancellation near ``r = 1``."""
    x = r - 1.0
    out = np.empty_like(x)
    small = np.abs(x) < 1e-2
    xs = x[small]
    # alternating series sum_{n>=2} (-x)^n / (n (n-1)), truncated far below rounding
    acc = np.zeros_like(xs)
    power = xs * xs
    for n in range(2, 10):
        acc += power / (n * (n - 1)) * (1 if n % 2 == 0 else -1)
        power = power * xs
    out[small] = acc
    xl = x[~small]
    rl = r[~small]
    with np.errstate(divide="ignore", invalid="ignore"):
        out[~small] = np.where(rl > 0, rl * np.log(np.where(rl > 0, rl, 1.0)) - xl, 1.0)
    return out


def relative_entropy_general(p: np.ndarray, pi: ProductMeasure) -> float:
    """``sum p log(p/pi)`` over all ``2^(N-1)`` configurations (``0 log 0 = 0``).

    Evaluated as ``sum pi phi(p/pi)`` with ``phi(r) = r log r - r + 1``, which
    equals the plain sum for normalized ``p`` and keeps full relative accuracy
    when ``p`` is close to ``pi``. Memory is ``O(2^(N-1))``; the lattice is
    capped at 20 sites.
    """
    p = np.asarray(p, dtype=float)
    n = pi.gamma.size
    if n > MAX_EXACT_SITES:
        raise CapacityError(f"{n} sites exceed the exact capacity of {MAX_EXACT_SITES}")
    if p.shape != (1 << n,):
        raise ValidationError(f"probability vector has shape {p.shape}, expected ({1 << n},)")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValidationError(f"probability vector not normalized (sum={p.sum()!r})")
    q = pi.probabilities()
    return float(math.fsum(q * _phi(p / q)))


def log_partition(gamma) -> float:
    return float(-np.sum(np.log1p(-np.asarray(gamma))))


def log_density_ratio(mu: ProductMeasure, theta: float, eta: Configuration | np.ndarray) -> float | np.ndarray:
    """``log d(mu)/d(nu_theta)`` written with chemical potentials and partition functions.

    ``eta`` may be a single configuration or an occupancy table of shape
    ``(n_configs, N-1)``.
    """
    occ = eta.occ if isinstance(eta, Configuration) else np.asarray(eta)
    n = mu.gamma.size
    out = occ @ (logit(mu.gamma) - logit(theta)) + n * -math.log1p(-theta) - log_partition(mu.gamma)
    return float(out) if np.ndim(out) == 0 else out


def relative_entropy_via_reference(p: np.ndarray, mu: ProductMeasure, theta: float) -> float:
    """``int f log(f/psi) d nu_theta`` with ``f = dp/d nu_theta`` and ``psi = d mu/d nu_theta``.

    Independent route to ``relative_entropy_general``; the answer must not
    depend on ``theta``.
    """
    n = mu.gamma.size
    occ = all_configurations(n)
    ref = ProductMeasure.homogeneous(n + 1, theta).probabilities()
    f = np.asarray(p) / ref
    log_psi = log_density_ratio(mu, theta, occ)
    pos = f > 0
    return float(np.sum(ref[pos] * f[pos] * (np.log(f[pos]) - log_psi[pos])))


def product_vector(gamma) -> np.ndarray:
    return ProductMeasure(np.asarray(gamma, dtype=float)).probabilities()


# ----------------------------------------------------------------------------
# Sampling


def sample(mu: ProductMeasure, rng: np.random.Generator) -> Configuration:
    occ = (rng.random(mu.gamma.size) < mu.gamma).astype(np.uint8)
    return Configuration(mu.N, occ)
