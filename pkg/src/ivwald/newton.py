"""Damped Newton root finder for vector estimating equations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConvergenceError, SingularJacobianError

DEFAULT_TOL = 1e-10
MAX_HALVINGS = 30
FD_STEP = 1e-6
# Condition number past which we treat the Jacobian as singular.
COND_LIMIT = 1e14


@dataclass(frozen=True)
class SolveReport:
    solution: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    damping_events: int


def fd_jacobian(residual: Callable, theta: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian, step 1e-6 * max(1, |theta_j|) per column."""
    theta = np.asarray(theta, dtype=float)
    q = theta.size
    r0 = np.asarray(residual(theta), dtype=float)
    jac = np.empty((r0.size, q))
    for j in range(q):
        h = FD_STEP * max(1.0, abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        jac[:, j] = (np.asarray(residual(up)) - np.asarray(residual(dn))) / (2.0 * h)
    return jac


def _newton_step(jac: np.ndarray, r: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(jac)):
        raise SingularJacobianError("Jacobian has non-finite entries")
    if np.linalg.cond(jac) > COND_LIMIT:
        raise SingularJacobianError("Jacobian is singular to working precision")
    try:
        return np.linalg.solve(jac, -r)
    except np.linalg.LinAlgError:
        raise SingularJacobianError("Jacobian is exactly singular") from None


def solve(
    residual: Callable,
    init,
    *,
    jacobian: Callable | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = 100,
    max_step: float | None = None,
) -> SolveReport:
    """Find theta with ||residual(theta)||_inf <= tol by damped Newton.

    `residual` maps a parameter vector to the estimating-equation value (an
    empirical mean).  The Jacobian defaults to central finite differences;
    pass `jacobian` for an analytic one.  Each iteration halves the step up
    to 30 times until the residual 2-norm decreases.  `max_step` caps the
    step 2-norm; for equations with saturating links this keeps single
    iterations from overshooting into flat regions where the Jacobian
    degenerates.
    """
    theta = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    r = np.atleast_1d(np.asarray(residual(theta), dtype=float))
    if not np.all(np.isfinite(r)):
        raise ConvergenceError("residual is non-finite at the initial point")
    damping = 0
    for it in range(max_iter + 1):
        if np.max(np.abs(r)) <= tol:
            return SolveReport(theta, float(np.max(np.abs(r))), it, True, damping)
        if it == max_iter:
            break
        jac = np.atleast_2d(
            jacobian(theta) if jacobian is not None else fd_jacobian(residual, theta)
        )
        step = _newton_step(jac, r)
        if max_step is not None:
            length = float(np.linalg.norm(step))
            if length > max_step:
                step *= max_step / length
        norm0 = float(np.linalg.norm(r))
        lam = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = theta + lam * step
            rc = np.atleast_1d(np.asarray(residual(cand), dtype=float))
            if np.all(np.isfinite(rc)) and np.linalg.norm(rc) < norm0:
                accepted = True
                break
            lam *= 0.5
            damping += 1
        if not accepted:
            raise ConvergenceError(
                f"no residual decrease after {MAX_HALVINGS} step halvings "
                f"(iteration {it}, |r|={norm0:.3e})"
            )
        theta, r = cand, rc
    raise ConvergenceError(
        f"no convergence in {max_iter} iterations (|r|_inf={np.max(np.abs(r)):.3e})"
    )
