"""Closed-form Riesz representers for weighted (derivative) effects.

A representer gamma(z, x) converts a weighted average derivative of a
regression in z into a plain weighted mean: E[gamma * m | X] = E[omega * dm/dz | X]
for differentiable m.  This module builds gamma from a weight (and back),
for known conditional laws of the instrument, and verifies the pairing
numerically.  It is an analysis and testing tool: nothing here estimates a
density from data.

Conventions: evaluators take (z, x) with x an optional covariate row (None
for laws that do not depend on x).  Continuous-law expectations use adaptive
Gauss-Kronrod quadrature on the (possibly truncated) support.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .errors import RepresenterError

QUAD_EPS = 1e-12
QUAD_LIMIT = 200
MASS_TOL = 1e-6
MEAN_ZERO_TOL = 1e-6
BOUNDARY_TOL = 1e-6
# Central-difference step for the derivative fallback.
FD_STEP = float(np.cbrt(np.finfo(float).eps))


class LawKind(enum.Enum):
    CONTINUOUS = "continuous"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class ConditionalLaw:
    """Conditional law of the instrument given a covariate row.

    For continuous laws `support` is the (possibly truncated) interval used
    for quadrature and `interior` is the sub-interval on which pointwise
    checks are meaningful (outside it the density underflows and ratios lose
    precision).  For categorical laws `levels` is K and pdf is the pmf.
    """

    kind: LawKind
    pdf: Callable
    cdf: Callable
    dlogp_dz: Callable | None = None
    support: tuple[float, float] | None = None
    interior: tuple[float, float] | None = None
    levels: int | None = None

    def validate(self, x=None) -> "ConditionalLaw":
        if self.kind is LawKind.CATEGORICAL:
            total = sum(self.pdf(k, x) for k in range(self.levels))
        else:
            total, _ = quad(
                lambda z: self.pdf(z, x), *self.support, epsabs=QUAD_EPS, epsrel=QUAD_EPS,
                limit=QUAD_LIMIT,
            )
        if abs(total - 1.0) > MASS_TOL:
            raise RepresenterError(f"law mass is {total}, not 1 within {MASS_TOL}")
        return self


@dataclass(frozen=True)
class RepresenterFn:
    evaluator: Callable
    kind: LawKind
    diagnostics: dict = field(default_factory=dict)

    def __call__(self, z, x=None):
        return self.evaluator(z, x)


@dataclass(frozen=True)
class WeightFn:
    evaluator: Callable

    def __call__(self, z, x=None):
        return self.evaluator(z, x)


# ---------------------------------------------------------------------------
# Law constructors


def gaussian_law(mean: float = 0.0, sigma: float = 1.0, *, width: float = 8.0) -> ConditionalLaw:
    """Normal law truncated to mean +- width*sigma for quadrature.

    The omitted tail mass at the default width is ~1.2e-15, far below the
    1e-6 mass tolerance; `interior` is mean +- 4*sigma.
    """
    if sigma <= 0:
        raise RepresenterError("sigma must be positive")
    c = 1.0 / (sigma * math.sqrt(2.0 * math.pi))

    def pdf(z, x=None):
        return c * math.exp(-0.5 * ((z - mean) / sigma) ** 2)

    def cdf(z, x=None):
        return 0.5 * (1.0 + math.erf((z - mean) / (sigma * math.sqrt(2.0))))

    def dlogp(z, x=None):
        return -(z - mean) / sigma**2

    return ConditionalLaw(
        kind=LawKind.CONTINUOUS,
        pdf=pdf,
        cdf=cdf,
        dlogp_dz=dlogp,
        support=(mean - width * sigma, mean + width * sigma),
        interior=(mean - 4.0 * sigma, mean + 4.0 * sigma),
    ).validate()


def uniform_law(a: float = 0.0, b: float = 1.0) -> ConditionalLaw:
    if not b > a:
        raise RepresenterError("uniform law requires b > a")
    width = b - a

    def pdf(z, x=None):
        return 1.0 / width if a <= z <= b else 0.0

    def cdf(z, x=None):
        return min(1.0, max(0.0, (z - a) / width))

    def dlogp(z, x=None):
        return 0.0

    pad = 0.02 * width
    return ConditionalLaw(
        kind=LawKind.CONTINUOUS,
        pdf=pdf,
        cdf=cdf,
        dlogp_dz=dlogp,
        support=(a, b),
        interior=(a + pad, b - pad),
    ).validate()


def categorical_law(probs) -> ConditionalLaw:
    """Pmf on levels 0..K-1; `probs` is a sequence or a callable (k, x)."""
    if callable(probs):
        raise RepresenterError("callable pmfs need an explicit level count; pass a sequence")
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise RepresenterError("categorical law needs at least two levels")
    levels = p.size

    def pdf(k, x=None):
        k = int(round(k))
        if not 0 <= k < levels:
            raise RepresenterError(f"level {k} outside 0..{levels - 1}")
        return float(p[k])

    def cdf(k, x=None):
        return float(np.sum(p[: int(math.floor(k)) + 1]))

    return ConditionalLaw(
        kind=LawKind.CATEGORICAL, pdf=pdf, cdf=cdf, levels=levels
    ).validate()


# ---------------------------------------------------------------------------
# Conditional expectations


def conditional_mean(fn: Callable, law: ConditionalLaw, x=None) -> float:
    """E[fn(Z, x) | X = x] by quadrature or summation."""
    if law.kind is LawKind.CATEGORICAL:
        return float(sum(fn(k, x) * law.pdf(k, x) for k in range(law.levels)))
    val, _ = quad(
        lambda z: fn(z, x) * law.pdf(z, x), *law.support,
        epsabs=QUAD_EPS, epsrel=QUAD_EPS, limit=QUAD_LIMIT,
    )
    return float(val)


def _interior_grid(law: ConditionalLaw, n: int = 41) -> np.ndarray:
    lo, hi = law.interior if law.interior is not None else law.support
    return np.linspace(lo, hi, n)


# ---------------------------------------------------------------------------
# Representers


def rr_categorical(weights, law: ConditionalLaw, levels: int | None = None) -> RepresenterFn:
    """Representer for the weighted sum of pairwise level contrasts.

    `weights` maps an ordered level pair (j, k) with j > k to a weight; it
    can be a callable (j, k, x) or a dict keyed by (j, k) holding constants
    or callables of x.
    """
    if law.kind is not LawKind.CATEGORICAL:
        raise RepresenterError("rr_categorical requires a categorical law")
    k_levels = levels if levels is not None else law.levels
    if k_levels != law.levels:
        raise RepresenterError(f"level count {k_levels} does not match the law ({law.levels})")

    if callable(weights):
        wfun = weights
    else:
        table = dict(weights)

        def wfun(j, k, x):
            v = table.get((j, k), 0.0)
            return v(x) if callable(v) else float(v)

    def ev(z, x=None):
        lev = int(round(z))
        pz = law.pdf(lev, x)
        if pz <= 0.0:
            raise RepresenterError(f"pmf is not positive at level {lev}")
        upper = sum(wfun(lev, k, x) for k in range(lev))
        lower = sum(wfun(k, lev, x) for k in range(lev + 1, k_levels))
        return (upper - lower) / pz

    return RepresenterFn(ev, LawKind.CATEGORICAL)


def rr_continuous(
    omega,
    domega_dz,
    law: ConditionalLaw,
    *,
    boundary_tol: float = BOUNDARY_TOL,
) -> RepresenterFn:
    """Representer gamma = -d(omega)/dz - omega * dlog p/dz.

    `omega` may be a WeightFn or a plain callable.  When `domega_dz` is None
    a central-difference derivative (step cbrt(eps) * max(1, |z|)) is used
    and flagged in the diagnostics.  The admissibility condition that
    omega * p vanishes on the support boundary is checked up front.
    """
    if law.kind is not LawKind.CONTINUOUS:
        raise RepresenterError("rr_continuous requires a continuous law")
    w = omega.evaluator if isinstance(omega, WeightFn) else omega
    a, b = law.support
    for endpoint in (a, b):
        edge = w(endpoint, None) * law.pdf(endpoint, None)
        if abs(edge) > boundary_tol:
            raise RepresenterError(
                f"weight * density = {edge:.3e} at support point {endpoint}; "
                "admissibility requires it to vanish on the boundary"
            )
    used_fd = domega_dz is None
    if used_fd:
        def dw(z, x):
            h = FD_STEP * max(1.0, abs(z))
            return (w(z + h, x) - w(z - h, x)) / (2.0 * h)
    else:
        dw = domega_dz

    def ev(z, x=None):
        return -dw(z, x) - w(z, x) * law.dlogp_dz(z, x)

    return RepresenterFn(ev, LawKind.CONTINUOUS, {"fd_derivative": used_fd})


def weight_from_rr(gamma, law: ConditionalLaw, *, mean_tol: float = MEAN_ZERO_TOL) -> WeightFn:
    """Recover the weight paired with a conditionally mean-zero representer.

    omega(z, x) = -(integral of gamma * p from the lower support bound to z)
    divided by p(z | x), evaluated with adaptive quadrature.
    """
    if law.kind is not LawKind.CONTINUOUS:
        raise RepresenterError("weight_from_rr requires a continuous law")
    g = gamma.evaluator if isinstance(gamma, RepresenterFn) else gamma
    a, b = law.support
    mean = conditional_mean(g, law, None)
    if abs(mean) > mean_tol:
        raise RepresenterError(
            f"representer is not conditionally mean-zero (E[gamma]={mean:.3e})"
        )
    for z in _interior_grid(law):
        if law.pdf(z, None) <= 0.0:
            raise RepresenterError(f"density vanishes in the interior at z={z}")

    def ev(z, x=None):
        pz = law.pdf(z, x)
        if pz <= 0.0:
            return 0.0
        integral, _ = quad(
            lambda t: g(t, x) * law.pdf(t, x), a, z,
            epsabs=QUAD_EPS, epsrel=QUAD_EPS, limit=QUAD_LIMIT,
        )
        return -integral / pz

    return WeightFn(ev)


def verify_representation(gamma, omega, mu, mu_dot, law: ConditionalLaw, x=None) -> float:
    """|E[gamma * mu | x] - E[omega * mu_dot | x]| by quadrature."""
    if law.kind is not LawKind.CONTINUOUS:
        raise RepresenterError("verify_representation requires a continuous law")
    g = gamma.evaluator if isinstance(gamma, RepresenterFn) else gamma
    w = omega.evaluator if isinstance(omega, WeightFn) else omega
    lhs = conditional_mean(lambda z, xx: g(z, xx) * mu(z), law, x)
    rhs = conditional_mean(lambda z, xx: w(z, xx) * mu_dot(z), law, x)
    return abs(lhs - rhs)


def dichotomization_rr(z0: float, law: ConditionalLaw) -> RepresenterFn:
    """Representer of the threshold contrast at z0.

    gamma(z, x) = (1{z >= z0} - (1 - F(z0|x))) / (F(z0|x) (1 - F(z0|x))),
    the representer induced by splitting the instrument at a fixed point.
    """
    if law.kind is not LawKind.CONTINUOUS:
        raise RepresenterError("dichotomization_rr requires a continuous law")

    def ev(z, x=None):
        f0 = law.cdf(z0, x)
        if not 0.0 < f0 < 1.0:
            raise RepresenterError(f"threshold {z0} leaves an empty side (F={f0})")
        return ((1.0 if z >= z0 else 0.0) - (1.0 - f0)) / (f0 * (1.0 - f0))

    return RepresenterFn(ev, LawKind.CONTINUOUS)


def roundtrip_max_error(gamma, law: ConditionalLaw, x=None, n_grid: int = 41) -> float:
    """Max pointwise gap on the interior grid after gamma -> omega -> gamma.

    Reconstructs the weight by quadrature, then re-derives the representer
    with the finite-difference fallback, so the round trip exercises the
    full numerical path rather than an algebraic identity.
    """
    g = gamma.evaluator if isinstance(gamma, RepresenterFn) else gamma
    w = weight_from_rr(g, law)
    g2 = rr_continuous(w, None, law)
    grid = _interior_grid(law, n_grid)
    return float(max(abs(g2(z, x) - g(z, x)) for z in grid))
