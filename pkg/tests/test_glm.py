import numpy as np
import pytest

from ivwald import RankDeficiencyError, SeparationError, fit_linear, fit_logistic
from ivwald.glm import expit
from ivwald.rngstreams import stream


def gaussian_elimination(a, b):
    """Row-reduction solve, independent of numpy.linalg."""
    a = [list(map(float, row)) for row in a]
    b = list(map(float, b))
    n = len(b)
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: abs(a[r][col]))
        a[col], a[pivot] = a[pivot], a[col]
        b[col], b[pivot] = b[pivot], b[col]
        for r in range(col + 1, n):
            f = a[r][col] / a[col][col]
            b[r] -= f * b[col]
            for c in range(col, n):
                a[r][c] -= f * a[col][c]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        x[r] = (b[r] - sum(a[r][c] * x[c] for c in range(r + 1, n))) / a[r][r]
    return np.array(x)


def gradient_descent_logistic(design, y, iters=200_000, lr=1.5):
    """Plain gradient ascent on the Bernoulli log-likelihood."""
    w = np.zeros(design.shape[1])
    n = len(y)
    for _ in range(iters):
        w = w + lr * design.T @ (y - expit(design @ w)) / n
    return w


class TestLogistic:
    def test_intercept_only_is_logit_of_mean(self):
        design = np.ones((8, 1))
        y = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])  # mean 0.25
        fit = fit_logistic(design, y)
        assert fit.converged
        assert fit.coefficients[0] == pytest.approx(np.log(0.25 / 0.75), abs=1e-9)

    def test_all_zero_response_is_separation(self):
        with pytest.raises(SeparationError):
            fit_logistic(np.ones((20, 1)), np.zeros(20))

    def test_separable_covariate_detected(self):
        x = np.column_stack([np.ones(20), np.r_[np.zeros(10), np.ones(10)]])
        y = np.r_[np.zeros(10), np.ones(10)]
        with pytest.raises(SeparationError):
            fit_logistic(x, y)

    def test_recovery_matches_gradient_descent_oracle(self):
        rng = stream(314, 0, 0)
        n = 200
        x2 = rng.normal(0.0, 1.0, n)
        design = np.column_stack([np.ones(n), x2])
        truth = np.array([0.5, -1.0])
        y = (rng.uniform(0, 1, n) < expit(design @ truth)).astype(float)
        fit = fit_logistic(design, y)
        # within 3 standard errors of the generating coefficients
        p = expit(design @ fit.coefficients)
        info = design.T @ (design * (p * (1 - p))[:, None])
        se = np.sqrt(np.diag(np.linalg.inv(info)))
        assert np.all(np.abs(fit.coefficients - truth) < 3 * se)
        # and on top of the same likelihood's gradient-descent optimum
        oracle = gradient_descent_logistic(design, y)
        assert np.max(np.abs(fit.coefficients - oracle)) < 1e-6

    def test_score_equation_holds_at_solution(self):
        rng = stream(7, 0, 0)
        design = np.column_stack([np.ones(150), rng.normal(0, 1, 150), rng.uniform(0, 1, 150)])
        y = (rng.uniform(0, 1, 150) < 0.4).astype(float)
        fit = fit_logistic(design, y)
        score = design.T @ (y - expit(design @ fit.coefficients)) / 150
        assert np.max(np.abs(score)) <= 1e-10
        assert fit.final_score_norm <= 1e-10

    def test_deterministic(self):
        rng = stream(9, 0, 0)
        design = np.column_stack([np.ones(60), rng.normal(0, 1, 60)])
        y = (rng.uniform(0, 1, 60) < 0.5).astype(float)
        a = fit_logistic(design, y).coefficients
        b = fit_logistic(design, y).coefficients
        assert np.array_equal(a, b)

    def test_rank_deficient_design(self):
        x = np.column_stack([np.ones(30), np.full(30, 2.0)])
        with pytest.raises(RankDeficiencyError):
            fit_logistic(x, np.tile([0.0, 1.0], 15))


class TestLinear:
    def test_exactly_determined_system(self):
        design = np.array([[1.0, 0.0], [1.0, 1.0]])
        fit = fit_linear(design, np.array([1.0, 3.0]))
        assert fit.coefficients == pytest.approx([1.0, 2.0], abs=1e-12)

    def test_noiseless_recovery(self):
        rng = stream(11, 0, 0)
        design = np.column_stack([np.ones(40), rng.normal(0, 1, 40), rng.uniform(0, 1, 40)])
        truth = np.array([0.1, -0.5, 1.0])
        fit = fit_linear(design, design @ truth)
        assert np.max(np.abs(fit.coefficients - truth)) < 1e-10

    def test_matches_gaussian_elimination_oracle(self):
        rng = stream(13, 0, 0)
        design = np.column_stack([np.ones(100), rng.normal(0, 1, 100), rng.uniform(-1, 1, 100)])
        y = rng.normal(0, 1, 100)
        fit = fit_linear(design, y)
        oracle = gaussian_elimination(design.T @ design, design.T @ y)
        assert np.max(np.abs(fit.coefficients - oracle)) < 1e-10

    def test_residual_orthogonality(self):
        rng = stream(17, 0, 0)
        design = np.column_stack([np.ones(80), rng.normal(0, 1, 80)])
        y = rng.normal(0, 2, 80)
        fit = fit_linear(design, y)
        inner = design.T @ (y - design @ fit.coefficients)
        assert np.max(np.abs(inner)) <= 1e-8 * 80

    def test_rank_deficient_design(self):
        design = np.column_stack([np.ones(10), np.ones(10)])
        with pytest.raises(RankDeficiencyError):
            fit_linear(design, np.arange(10.0))
