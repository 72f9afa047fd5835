"""Maximum-likelihood fits for the plain nuisance regressions.

Logistic regression (Newton/IRLS with step-halving) for binary responses and
ordinary least squares for continuous ones.  No regularization: downstream
estimating-equation theory needs exact MLE score equations, so the fits drive
the score to (near) zero rather than trading bias for stability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, RankDeficiencyError, SeparationError

MAX_ITER = 100
SCORE_TOL = 1e-10
# Relative pivot threshold for rank detection.
PIVOT_RTOL = 1e-12
# |coefficient| on the RMS-standardized design beyond which the logistic MLE
# is considered divergent (separation): the linear predictor is then past
# +-30, where fitted probabilities are within 1e-13 of 0 or 1.
SEPARATION_COEF = 30.0


@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_score_norm: float


def expit(t):
    out = np.empty_like(t, dtype=float)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return out


def check_rank(design: np.ndarray, what: str) -> None:
    """Raise unless the matrix has full column rank (pivoted QR test)."""
    r = scipy.linalg.qr(design, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0 or np.min(diag) <= PIVOT_RTOL * diag[0]:
        raise RankDeficiencyError(f"{what}: design matrix is rank deficient")


def fit_linear(design: np.ndarray, response: np.ndarray) -> FitResult:
    """Least squares via pivoted QR; exact normal-equation solution."""
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float).reshape(-1)
    n, q = design.shape
    if n < q:
        raise RankDeficiencyError(f"fit_linear: n={n} < q={q}")
    check_rank(design, "fit_linear")
    qm, rm, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    coef_piv = scipy.linalg.solve_triangular(rm, qm.T @ response)
    coef = np.empty(q)
    coef[piv] = coef_piv
    score = design.T @ (response - design @ coef) / n
    return FitResult(coef, True, 1, float(np.max(np.abs(score))))


def _bernoulli_loglik(eta: np.ndarray, y: np.ndarray) -> float:
    # log L = sum y*eta - log(1 + e^eta), computed overflow-safe
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(
    design: np.ndarray,
    response: np.ndarray,
    *,
    tol: float = SCORE_TOL,
    max_iter: int = MAX_ITER,
) -> FitResult:
    """Bernoulli MLE with expit link.

    Newton/IRLS with step-halving whenever the log-likelihood would decrease.
    Converges when the mean-score infinity norm drops to `tol`; raises
    SeparationError when the standardized coefficient norm diverges past
    SEPARATION_COEF, and ConvergenceError after `max_iter` iterations.
    """
    design = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float).reshape(-1)
    n, q = design.shape
    if n < q:
        raise RankDeficiencyError(f"fit_logistic: n={n} < q={q}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("fit_logistic: response must be binary {0,1}")
    check_rank(design, "fit_logistic")

    # Column RMS for the separation check; the intercept column has RMS 1.
    rms = np.sqrt(np.mean(design**2, axis=0))

    coef = np.zeros(q)
    eta = design @ coef
    loglik = _bernoulli_loglik(eta, y)
    for it in range(1, max_iter + 1):
        p = expit(eta)
        score = design.T @ (y - p) / n
        if np.max(np.abs(score)) <= tol:
            if np.max(p * (1.0 - p)) < 1e-6:
                # Score underflow with every fitted probability on the
                # boundary: the likelihood has no interior maximum.
                raise SeparationError(
                    "fit_logistic: response is perfectly separated (all fitted "
                    "probabilities on the boundary)"
                )
            return FitResult(coef, True, it - 1, float(np.max(np.abs(score))))
        w = p * (1.0 - p)
        hess = design.T @ (design * w[:, None]) / n
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise SeparationError(
                "fit_logistic: singular information matrix (separation or degenerate design)"
            ) from None
        lam = 1.0
        # Halve only on a decrease that exceeds roundoff; near the optimum
        # the change underflows and the pure Newton step must be accepted.
        floor = loglik - 1e-10 * (1.0 + abs(loglik))
        for _ in range(31):
            cand = coef + lam * step
            eta_c = design @ cand
            ll_c = _bernoulli_loglik(eta_c, y)
            if ll_c >= floor or lam < 2**-30:
                break
            lam *= 0.5
        coef, eta, loglik = cand, eta_c, ll_c
        if np.max(np.abs(coef * rms)) > SEPARATION_COEF:
            raise SeparationError(
                "fit_logistic: coefficients diverging, data are (quasi-)separated"
            )
    raise ConvergenceError(f"fit_logistic: no convergence in {max_iter} iterations")
