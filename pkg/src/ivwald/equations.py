"""The concrete estimating equations behind the ATE estimators.

Every equation here has the common moment form

    mean_i[ c_i * (a_i - g(m_i' theta) * b_i) ] = 0,

where c_i is a row of instrument functions, m_i the working-model design row,
and g the link.  For the identity link the system is affine in theta and
Newton lands in one step; for tanh an analytic Jacobian drives the damped
Newton solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Link, ObservationTable, WorkingModelSpec, design
from .errors import (
    ConvergenceError,
    DegenerateEquationError,
    PositivityError,
    SingularJacobianError,
)
from .glm import expit
from .newton import COND_LIMIT, DEFAULT_TOL, SolveReport, solve

# Fitted treatment probabilities must stay off {0, 1}; the covariance
# reparameterization denominator must stay off 0.  Violations are hard
# errors: truncating silently would mask a positivity failure.
PROP_FLOOR = 1e-10
DENOM_FLOOR = 1e-10


def link_value(link: Link, t: np.ndarray) -> np.ndarray:
    if link is Link.IDENTITY:
        return t
    if link is Link.TANH:
        return np.tanh(t)
    return expit(t)


def link_deriv(link: Link, t: np.ndarray) -> np.ndarray:
    if link is Link.IDENTITY:
        return np.ones_like(t)
    if link is Link.TANH:
        # sech(t)^2 without overflow for large |t|
        sech = 2.0 * np.exp(-np.abs(t)) / (1.0 + np.exp(-2.0 * np.abs(t)))
        return sech**2
    p = expit(t)
    return p * (1.0 - p)


def predict_nuisance(
    table: ObservationTable, spec: WorkingModelSpec, name: str, params
) -> np.ndarray:
    model = spec.model(name)
    m = design(table, model.columns)
    params = np.asarray(params, dtype=float)
    if params.shape != (m.shape[1],):
        raise ValueError(
            f"{name}: parameter length {params.shape} does not match design ({m.shape[1]} columns)"
        )
    return link_value(model.link, m @ params)


@dataclass(frozen=True)
class MomentSystem:
    """mean[crows * (a - g(design @ theta) * b)] = 0, plus its Jacobian."""

    crows: np.ndarray
    a: np.ndarray
    b: np.ndarray
    design: np.ndarray
    link: Link
    diagnostics: dict = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return self.crows.shape[1]

    def per_row(self, params) -> np.ndarray:
        fit = link_value(self.link, self.design @ np.asarray(params, dtype=float))
        return self.crows * (self.a - fit * self.b)[:, None]

    def residual(self, params) -> np.ndarray:
        return self.per_row(params).mean(axis=0)

    def jacobian(self, params) -> np.ndarray:
        gp = link_deriv(self.link, self.design @ np.asarray(params, dtype=float))
        n = self.crows.shape[0]
        return -(self.crows * (gp * self.b)[:, None]).T @ self.design / n


@dataclass(frozen=True)
class EquationFit:
    params: np.ndarray
    report: SolveReport
    diagnostics: dict


# Step cap for saturating links, in parameter 2-norm.  One capped step can
# still traverse the whole informative range of a tanh linear predictor, but
# cannot jump deep into the flat tails and strand the iteration there.
TANH_MAX_STEP = 2.0
# Deterministic restart offsets (scaled coordinate vectors) tried when the
# zero-initialized Newton run fails.
RESTART_SCALE = 0.5


def _solve_system(
    system: MomentSystem,
    *,
    init=None,
    tol: float = DEFAULT_TOL,
    require_identified: bool = False,
) -> EquationFit:
    q = system.dimension
    theta0 = np.zeros(q) if init is None else np.asarray(init, dtype=float)
    if require_identified:
        jac0 = system.jacobian(theta0)
        if not np.all(np.isfinite(jac0)) or np.linalg.cond(jac0) > COND_LIMIT:
            raise DegenerateEquationError(system.diagnostics.get(
                "degenerate_message", "estimating equation does not identify the parameter"
            ))
    if system.link is Link.IDENTITY:
        report = solve(system.residual, theta0, jacobian=system.jacobian, tol=tol)
        return EquationFit(report.solution, report, dict(system.diagnostics))
    # Bounded links: documented zero-initialized root first, deterministic
    # restarts after a failure.  A sample in which no restart finds a root
    # typically admits none (the moment target falls outside the range of
    # the saturating link), which surfaces as the final ConvergenceError.
    starts = [theta0]
    for j in range(q):
        for sign in (1.0, -1.0):
            offset = np.zeros(q)
            offset[j] = sign * RESTART_SCALE
            starts.append(theta0 + offset)
    last_error: Exception | None = None
    for start in starts:
        try:
            report = solve(
                system.residual, start, jacobian=system.jacobian, tol=tol,
                max_step=TANH_MAX_STEP,
            )
            return EquationFit(report.solution, report, dict(system.diagnostics))
        except (ConvergenceError, SingularJacobianError) as exc:
            last_error = exc
    raise ConvergenceError(
        f"estimating equation has no root reachable from {len(starts)} starts "
        f"(last failure: {last_error})"
    )


def _mu_d_checked(table, spec, iota) -> np.ndarray:
    mu_d = predict_nuisance(table, spec, "mu_d", iota)
    off = np.flatnonzero((mu_d <= PROP_FLOOR) | (mu_d >= 1.0 - PROP_FLOOR))
    if off.size:
        raise PositivityError(
            f"fitted treatment probability {mu_d[off[0]]:.3e} at row {off[0]} "
            f"violates the ({PROP_FLOOR}, 1-{PROP_FLOOR}) floor"
        )
    return mu_d


def _cov_denominator(table, spec, beta, mu_d) -> np.ndarray:
    delta_z = predict_nuisance(table, spec, "delta_z", beta)
    denom = delta_z * mu_d * (1.0 - mu_d)
    off = np.flatnonzero(np.abs(denom) < DENOM_FLOOR)
    if off.size:
        raise PositivityError(
            f"|delta_z * mu_d * (1 - mu_d)| = {abs(denom[off[0]]):.3e} at row {off[0]} "
            f"is below the {DENOM_FLOOR} floor"
        )
    return denom


# ---------------------------------------------------------------------------
# The five equations


def beta_ipw_system(table, spec, iota, *, phi=None) -> MomentSystem:
    """IPW equation for the instrument-shift curve delta_z.

    mean[phi1(X) (DZ/mu_d - (1-D)Z/(1-mu_d) - delta_z(X; beta))] = 0.
    """
    mu_d = _mu_d_checked(table, spec, iota)
    m = design(table, spec.delta_z.columns)
    crows = np.asarray(phi, dtype=float) if phi is not None else m
    w = table.d * table.z / mu_d - (1.0 - table.d) * table.z / (1.0 - mu_d)
    diags = {}
    if np.min(table.d) == np.max(table.d):
        # A one-armed sample still yields a root, but nothing in it can
        # attest that the instrument moves the treatment.
        diags["iv_relevance_unverifiable"] = True
    return MomentSystem(crows, w, np.ones(table.n), m, spec.delta_z.link, diags)


def estimate_beta_ipw(table, spec, iota, *, phi=None, tol=DEFAULT_TOL) -> EquationFit:
    return _solve_system(beta_ipw_system(table, spec, iota, phi=phi), tol=tol)


def alpha_dr_system(
    table, spec, zeta, iota, theta, beta=None, *, phi2_mode="plain", phi=None
) -> MomentSystem:
    """Doubly robust g-estimation equation for the effect curve delta.

    mean[phi2(X) (Z - mu_z) {Y - mu_y - delta(X; alpha)(D - mu_d)}] = 0.
    In bounded mode the first component of phi2 becomes the covariance
    reparameterization weight 1/(delta_z * mu_d * (1 - mu_d)), which forces
    the correction term of the triply robust estimator to average to zero.
    """
    if phi2_mode not in ("plain", "bounded"):
        raise ValueError(f"unknown phi2_mode {phi2_mode!r}")
    mu_z = predict_nuisance(table, spec, "mu_z", zeta)
    # The plain equation uses mu_d only through d - mu_d, so no floor there;
    # the bounded weight divides by mu_d (1 - mu_d) and needs one.
    mu_d = predict_nuisance(table, spec, "mu_d", iota)
    mu_y = predict_nuisance(table, spec, "mu_y", theta)
    m = design(table, spec.delta.columns)
    if phi is not None:
        phi2 = np.asarray(phi, dtype=float)
    elif phi2_mode == "bounded":
        if beta is None:
            raise ValueError("bounded phi2 requires the fitted delta_z parameters")
        denom = _cov_denominator(table, spec, beta, mu_d)
        phi2 = m.copy()
        phi2[:, 0] = 1.0 / denom
    else:
        phi2 = m
    crows = phi2 * (table.z - mu_z)[:, None]
    return MomentSystem(crows, table.y - mu_y, table.d - mu_d, m, spec.delta.link)


def estimate_alpha_dr(
    table, spec, zeta, iota, theta, beta=None, *, phi2_mode="plain", phi=None, tol=DEFAULT_TOL
) -> EquationFit:
    # No identification pre-check here: a residual that is identically zero
    # at the origin (outcome and treatment fitted exactly) legitimately
    # returns the zero solution.
    system = alpha_dr_system(
        table, spec, zeta, iota, theta, beta, phi2_mode=phi2_mode, phi=phi
    )
    fit = _solve_system(system, tol=tol)
    fit.diagnostics["phi2_mode"] = phi2_mode
    return fit


def alpha_1_system(table, spec, theta, iota, *, phi=None) -> MomentSystem:
    """Outcome-model equation: mean[phi(X) Z {Y - mu_y - delta(X; a)(D - mu_d)}] = 0."""
    mu_d = predict_nuisance(table, spec, "mu_d", iota)
    mu_y = predict_nuisance(table, spec, "mu_y", theta)
    m = design(table, spec.delta.columns)
    base = np.asarray(phi, dtype=float) if phi is not None else m
    crows = base * table.z[:, None]
    return MomentSystem(
        crows, table.y - mu_y, table.d - mu_d, m, spec.delta.link,
        {"degenerate_message": "effect parameter is not identified: the instrument "
                               "carries no usable variation (is z identically zero?)"},
    )


def estimate_alpha_1(table, spec, theta, iota, *, phi=None, tol=DEFAULT_TOL) -> EquationFit:
    system = alpha_1_system(table, spec, theta, iota, phi=phi)
    return _solve_system(system, tol=tol, require_identified=True)


def alpha_2b_system(table, spec, zeta, iota, beta, *, phi=None) -> MomentSystem:
    """Projection of the covariance-ratio signal onto the effect curve.

    mean[phi(X) {(Z - mu_z) Y / (delta_z mu_d (1 - mu_d)) - delta(X; a)}] = 0.

    The projection model lives on the instrument-shift model's covariate
    columns (with the effect curve's link): the estimator is consistent
    under the instrument-side models regardless of the effect-curve
    specification, and restricting the projection to the same covariate
    list keeps the equation solvable when the signal has mass outside the
    saturated link's range on richer designs.
    """
    mu_z = predict_nuisance(table, spec, "mu_z", zeta)
    mu_d = _mu_d_checked(table, spec, iota)
    denom = _cov_denominator(table, spec, beta, mu_d)
    m = design(table, spec.delta_z.columns)
    crows = np.asarray(phi, dtype=float) if phi is not None else m
    w = (table.z - mu_z) * table.y / denom
    return MomentSystem(
        crows, w, np.ones(table.n), m, spec.delta.link,
        {"degenerate_message": "effect parameter is not identified: degenerate design"},
    )


def estimate_alpha_2b(table, spec, zeta, iota, beta, *, phi=None, tol=DEFAULT_TOL) -> EquationFit:
    system = alpha_2b_system(table, spec, zeta, iota, beta, phi=phi)
    return _solve_system(system, tol=tol, require_identified=True)


def alpha2_projection(table, spec, params) -> np.ndarray:
    """Effect-curve values of the bounded covariance-ratio projection."""
    m = design(table, spec.delta_z.columns)
    return link_value(spec.delta.link, m @ np.asarray(params, dtype=float))


def alpha_3_system(table, spec, zeta, *, phi=None) -> MomentSystem:
    """g-estimation equation: mean[phi(X) (Z - mu_z) {Y - delta(X; a) D}] = 0."""
    mu_z = predict_nuisance(table, spec, "mu_z", zeta)
    m = design(table, spec.delta.columns)
    base = np.asarray(phi, dtype=float) if phi is not None else m
    crows = base * (table.z - mu_z)[:, None]
    return MomentSystem(
        crows, table.y, table.d, m, spec.delta.link,
        {"degenerate_message": "effect parameter is not identified: the treatment "
                               "has no variation (is d identically zero?)"},
    )


def estimate_alpha_3(table, spec, zeta, *, phi=None, tol=DEFAULT_TOL) -> EquationFit:
    system = alpha_3_system(table, spec, zeta, phi=phi)
    return _solve_system(system, tol=tol, require_identified=True)
