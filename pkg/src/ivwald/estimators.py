"""ATE estimators, comparators, and uncertainty quantification.

Point estimators:

    delta1      outcome-model estimator (consistent when the effect curve,
                treatment, and outcome regressions are right)
    delta2      inverse-covariance-weighted estimator (unbounded)
    delta_b2    bounded projection of delta2 onto the effect curve
    delta3      g-estimation estimator (instrument regression + effect curve)
    delta_tr    triply robust estimator
    delta_b_tr  bounded triply robust estimator, always inside [-1, 1]
    crude_rd    unadjusted risk difference
    tsls        two-stage least squares with a single instrument

Uncertainty: nonparametric bootstrap with a full nuisance re-fit inside each
resample (default), or stacked-equation sandwich variances.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import rngstreams
from .data import Link, ObservationTable, WorkingModelSpec, design
from .equations import (
    alpha2_projection,
    alpha_1_system,
    alpha_2b_system,
    alpha_3_system,
    alpha_dr_system,
    beta_ipw_system,
    estimate_alpha_1,
    estimate_alpha_2b,
    estimate_alpha_3,
    estimate_alpha_dr,
    estimate_beta_ipw,
    link_value,
    predict_nuisance,
    _cov_denominator,
)
from .errors import ConvergenceError, DataError, IvwaldError, RankDeficiencyError, SimulationError
from .glm import FitResult, check_rank, fit_linear, fit_logistic
from .newton import fd_jacobian

ESTIMATOR_IDS = (
    "delta1", "delta2", "delta_b2", "delta3", "delta_tr", "delta_b_tr", "crude_rd", "tsls",
)
# Empirical mean of the triply robust correction term at bounded nuisances;
# must vanish by construction.
CORRECTION_TOL = 1e-8


@dataclass(frozen=True)
class NuisanceEstimates:
    """Fitted nuisance parameters plus per-fit diagnostics."""

    spec: WorkingModelSpec
    zeta: np.ndarray
    iota: np.ndarray
    theta: np.ndarray
    beta: np.ndarray | None = None
    alpha: np.ndarray | None = None
    phi2_mode: str | None = None
    reports: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EstimateResult:
    estimator: str
    point: float
    n: int
    se: float | None = None
    ci: tuple[float, float] | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "point": self.point,
            "se": self.se,
            "ci": list(self.ci) if self.ci is not None else None,
            "n": self.n,
            "diagnostics": {k: v for k, v in self.diagnostics.items()},
        }


def _reject_polytomous(table: ObservationTable) -> None:
    if table.z_levels is not None and table.z_levels > 2:
        raise DataError(
            f"estimators support a continuous or binary instrument; got a "
            f"categorical instrument with {table.z_levels} levels (collapse "
            f"levels or use the representer toolkit directly)"
        )


def _mle(table, spec, name, response) -> FitResult:
    m = design(table, spec.model(name).columns)
    if spec.model(name).link is Link.EXPIT:
        return fit_logistic(m, response)
    return fit_linear(m, response)


def fit_nuisances(
    table: ObservationTable,
    spec: WorkingModelSpec,
    *,
    phi2_mode: str = "plain",
    with_beta: bool = True,
    with_alpha: bool = True,
) -> NuisanceEstimates:
    """Fit the working-model nuisances in dependency order.

    The three plain regressions are fitted by maximum likelihood, the
    instrument-shift curve by IPW, and the effect curve by doubly robust
    g-estimation (bounded phi2 when targeting the bounded triply robust
    estimator).
    """
    _reject_polytomous(table)
    spec.validate_against(table)
    zeta = _mle(table, spec, "mu_z", table.z)
    iota = _mle(table, spec, "mu_d", table.d)
    theta = _mle(table, spec, "mu_y", table.y)
    reports = {"zeta": zeta, "iota": iota, "theta": theta}
    beta = alpha = None
    diagnostics = {}
    if with_beta or (with_alpha and phi2_mode == "bounded"):
        bfit = estimate_beta_ipw(table, spec, iota.coefficients)
        reports["beta"] = bfit.report
        diagnostics.update(bfit.diagnostics)
        beta = bfit.params
    if with_alpha:
        afit = estimate_alpha_dr(
            table, spec, zeta.coefficients, iota.coefficients, theta.coefficients,
            beta, phi2_mode=phi2_mode,
        )
        reports["alpha"] = afit.report
        alpha = afit.params
    return NuisanceEstimates(
        spec=spec,
        zeta=zeta.coefficients,
        iota=iota.coefficients,
        theta=theta.coefficients,
        beta=beta,
        alpha=alpha,
        phi2_mode=phi2_mode if with_alpha else None,
        reports=reports,
        diagnostics=diagnostics,
    )


def residual_e(table: ObservationTable, nu: NuisanceEstimates) -> np.ndarray:
    """Per-row residual y - mu_y - delta(x)(d - mu_d) at the fitted nuisances."""
    if nu.alpha is None:
        raise ValueError("residual_e requires a fitted effect curve (alpha)")
    mu_d = predict_nuisance(table, nu.spec, "mu_d", nu.iota)
    mu_y = predict_nuisance(table, nu.spec, "mu_y", nu.theta)
    delta = predict_nuisance(table, nu.spec, "delta", nu.alpha)
    return table.y - mu_y - delta * (table.d - mu_d)


def _tr_terms(table, nu) -> tuple[np.ndarray, np.ndarray]:
    mu_z = predict_nuisance(table, nu.spec, "mu_z", nu.zeta)
    mu_d = predict_nuisance(table, nu.spec, "mu_d", nu.iota)
    denom = _cov_denominator(table, nu.spec, nu.beta, mu_d)
    correction = (table.z - mu_z) * residual_e(table, nu) / denom
    delta = predict_nuisance(table, nu.spec, "delta", nu.alpha)
    return correction, delta


def delta_tr(table: ObservationTable, nu: NuisanceEstimates) -> EstimateResult:
    """Triply robust estimator: mean of the corrected effect-curve values."""
    correction, delta = _tr_terms(table, nu)
    point = float(np.mean(correction + delta))
    return EstimateResult("delta_tr", point, table.n,
                          diagnostics={"phi2_mode": nu.phi2_mode})


def delta_b_tr(table: ObservationTable, nu: NuisanceEstimates) -> EstimateResult:
    """Bounded triply robust estimator: mean effect-curve value at bounded nuisances.

    The correction term of the triply robust estimator averages to zero at
    these nuisances (it is the first component of the solved estimating
    equation), so this equals delta_tr while staying inside [-1, 1].
    """
    if nu.phi2_mode != "bounded":
        raise ValueError("delta_b_tr requires nuisances fitted with phi2_mode='bounded'")
    correction, delta = _tr_terms(table, nu)
    corr_mean = float(np.mean(correction))
    if abs(corr_mean) > CORRECTION_TOL:
        raise ConvergenceError(
            f"triply robust correction term averages to {corr_mean:.3e}; "
            "the bounded estimating equation did not solve cleanly"
        )
    point = float(np.mean(delta))
    return EstimateResult(
        "delta_b_tr", point, table.n,
        diagnostics={"correction_mean": corr_mean, "phi2_mode": "bounded"},
    )


def delta_1(table: ObservationTable, nu: NuisanceEstimates) -> EstimateResult:
    fit = estimate_alpha_1(table, nu.spec, nu.theta, nu.iota)
    point = float(np.mean(predict_nuisance(table, nu.spec, "delta", fit.params)))
    return EstimateResult("delta1", point, table.n,
                          diagnostics={"alpha1": fit.params.tolist()})


def delta_2(table: ObservationTable, nu: NuisanceEstimates) -> EstimateResult:
    mu_z = predict_nuisance(table, nu.spec, "mu_z", nu.zeta)
    mu_d = predict_nuisance(table, nu.spec, "mu_d", nu.iota)
    denom = _cov_denominator(table, nu.spec, nu.beta, mu_d)
    point = float(np.mean((table.z - mu_z) * table.y / denom))
    return EstimateResult("delta2", point, table.n)


def delta_b2(table: ObservationTable, nu: NuisanceEstimates) -> EstimateResult:
    fit = estimate_alpha_2b(table, nu.spec, nu.zeta, nu.iota, nu.beta)
    point = float(np.mean(alpha2_projection(table, nu.spec, fit.params)))
    return EstimateResult("delta_b2", point, table.n,
                          diagnostics={"alpha2": fit.params.tolist()})


def delta_3(table: ObservationTable, nu: NuisanceEstimates) -> EstimateResult:
    fit = estimate_alpha_3(table, nu.spec, nu.zeta)
    point = float(np.mean(predict_nuisance(table, nu.spec, "delta", fit.params)))
    return EstimateResult("delta3", point, table.n,
                          diagnostics={"alpha3": fit.params.tolist()})


def crude_rd(table: ObservationTable) -> EstimateResult:
    treated = table.d == 1.0
    n1 = int(treated.sum())
    n0 = table.n - n1
    if n1 == 0 or n0 == 0:
        raise DataError(f"crude_rd: a treatment arm is empty (n1={n1}, n0={n0})")
    point = float(table.y[treated].mean() - table.y[~treated].mean())
    return EstimateResult("crude_rd", point, table.n, diagnostics={"n1": n1, "n0": n0})


def tsls(table: ObservationTable, columns=None) -> EstimateResult:
    """Two-stage least squares with z as the single excluded instrument."""
    _reject_polytomous(table)
    cols = tuple(columns) if columns is not None else tuple(range(table.p))
    xmat = design(table, cols)
    stage1 = np.column_stack([table.z, xmat])
    check_rank(stage1, "tsls stage 1")
    d_hat = stage1 @ fit_linear(stage1, table.d).coefficients
    stage2 = np.column_stack([d_hat, xmat])
    check_rank(stage2, "tsls stage 2")
    coef = fit_linear(stage2, table.y).coefficients
    return EstimateResult("tsls", float(coef[0]), table.n,
                          diagnostics={"columns": list(cols)})


# ---------------------------------------------------------------------------
# Dispatch


def estimate_suite(
    table: ObservationTable,
    spec: WorkingModelSpec | None,
    estimators,
    *,
    on_error: str = "raise",
) -> dict[str, EstimateResult | None]:
    """Compute several estimators, sharing the common nuisance fits.

    With on_error="collect", an estimator whose fit fails maps to None
    instead of aborting the others (a shared base-fit failure fails all
    model-based estimators together).
    """
    estimators = list(estimators)
    if on_error not in ("raise", "collect"):
        raise ValueError(f"unknown on_error mode {on_error!r}")
    for est in estimators:
        if est not in ESTIMATOR_IDS:
            raise DataError(f"unknown estimator {est!r}; expected one of {ESTIMATOR_IDS}")
    _reject_polytomous(table)
    results: dict[str, EstimateResult | None] = dict.fromkeys(estimators)

    def guarded(est, fn):
        try:
            results[est] = fn()
        except IvwaldError:
            if on_error == "raise":
                raise

    model_based = [e for e in estimators if e not in ("crude_rd", "tsls")]
    if model_based:
        if spec is None:
            raise DataError("model-based estimators require a working-model spec")
        need_beta = any(e in ("delta2", "delta_b2", "delta_tr", "delta_b_tr") for e in model_based)
        try:
            base = fit_nuisances(table, spec, with_beta=need_beta, with_alpha=False)
        except IvwaldError:
            if on_error == "raise":
                raise
            base = None
        if base is not None:
            flavors: dict[str, NuisanceEstimates] = {}

            def with_alpha(mode):
                if mode not in flavors:
                    afit = estimate_alpha_dr(
                        table, spec, base.zeta, base.iota, base.theta, base.beta,
                        phi2_mode=mode,
                    )
                    flavors[mode] = replace(base, alpha=afit.params, phi2_mode=mode)
                return flavors[mode]

            dispatch = {
                "delta_tr": lambda: delta_tr(table, with_alpha("plain")),
                "delta_b_tr": lambda: delta_b_tr(table, with_alpha("bounded")),
                "delta1": lambda: delta_1(table, base),
                "delta2": lambda: delta_2(table, base),
                "delta_b2": lambda: delta_b2(table, base),
                "delta3": lambda: delta_3(table, base),
            }
            for est in model_based:
                guarded(est, dispatch[est])
    if "crude_rd" in estimators:
        guarded("crude_rd", lambda: crude_rd(table))
    if "tsls" in estimators:
        guarded("tsls", lambda: tsls(table))
    return {est: results[est] for est in estimators}


def point_estimate(table, spec, estimator) -> EstimateResult:
    return estimate_suite(table, spec, [estimator])[estimator]


# ---------------------------------------------------------------------------
# Bootstrap


def _resample(table: ObservationTable, idx) -> ObservationTable:
    return replace(table, y=table.y[idx], d=table.d[idx], z=table.z[idx], x=table.x[idx])


def bootstrap(
    table: ObservationTable,
    spec: WorkingModelSpec | None,
    estimator: str,
    *,
    b: int,
    seed: int,
    threads: int = 1,
    level: float = 0.95,
    max_failure_rate: float = 0.05,
) -> EstimateResult:
    """Nonparametric bootstrap with a full per-resample nuisance re-fit.

    Resample b derives its rows from stream (seed, bootstrap context, b), so
    results are identical for any thread count.  Resamples whose fit fails
    are dropped and counted; more than `max_failure_rate` failures aborts.
    """
    if b < 2:
        raise ValueError("bootstrap requires at least 2 resamples")
    point = point_estimate(table, spec, estimator)
    n = table.n

    def one(idx_b: int) -> float:
        rng = rngstreams.stream(seed, rngstreams.CTX_BOOTSTRAP, idx_b)
        rows = rng.integers(0, n, size=n)
        try:
            return point_estimate(_resample(table, rows), spec, estimator).point
        except IvwaldError:
            return np.nan

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = np.fromiter(pool.map(one, range(b)), dtype=float, count=b)
    else:
        values = np.fromiter(map(one, range(b)), dtype=float, count=b)
    ok = values[np.isfinite(values)]
    n_failed = b - ok.size
    if n_failed > max_failure_rate * b:
        raise SimulationError(
            f"bootstrap: {n_failed}/{b} resamples failed (limit {max_failure_rate:.0%})"
        )
    se = float(np.std(ok, ddof=1))
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(ok, [tail, 100.0 - tail])
    diags = dict(point.diagnostics)
    diags.update({"bootstrap_b": b, "bootstrap_seed": seed, "bootstrap_failed": n_failed})
    return replace(point, se=se, ci=(float(lo), float(hi)), diagnostics=diags)


# ---------------------------------------------------------------------------
# Sandwich variance via stacked estimating equations


def _mle_rows(table, spec, name, response):
    model = spec.model(name)
    m = design(table, spec.model(name).columns)

    def rows(par):
        return m * (response - link_value(model.link, m @ par))[:, None]

    return m.shape[1], rows


def _stacked_rows(table, spec, estimator):
    """Per-row stacked moment function and the fitted stacked parameters.

    Returns (big0, rows_fn) where rows_fn maps the stacked parameter vector
    to the n x K matrix of per-observation moment contributions, with the
    ATE as the final coordinate.
    """
    mode = "bounded" if estimator == "delta_b_tr" else "plain"
    need_beta = estimator in ("delta2", "delta_b2", "delta_tr", "delta_b_tr")
    nu = fit_nuisances(table, spec, phi2_mode=mode, with_beta=need_beta,
                       with_alpha=estimator in ("delta_tr", "delta_b_tr"))
    blocks: list[tuple[str, int, object]] = []

    def add(name, dim, fn):
        blocks.append((name, dim, fn))

    qz, rows_z = _mle_rows(table, spec, "mu_z", table.z)
    qd, rows_d = _mle_rows(table, spec, "mu_d", table.d)
    qy, rows_y = _mle_rows(table, spec, "mu_y", table.y)
    values: dict[str, np.ndarray] = {"zeta": nu.zeta, "iota": nu.iota, "theta": nu.theta}
    m_delta = design(table, spec.delta.columns)
    link_delta = spec.delta.link

    def delta_of(par):
        return link_value(link_delta, m_delta @ par)

    if estimator == "delta1":
        afit = estimate_alpha_1(table, spec, nu.theta, nu.iota)
        values["alpha"] = afit.params
        add("theta", qy, lambda th, _: rows_y(th["theta"]))
        add("iota", qd, lambda th, _: rows_d(th["iota"]))
        add("alpha", len(afit.params),
            lambda th, _: alpha_1_system(table, spec, th["theta"], th["iota"]).per_row(th["alpha"]))
        final = lambda th: delta_of(th["alpha"])
    elif estimator == "delta3":
        afit = estimate_alpha_3(table, spec, nu.zeta)
        values["alpha"] = afit.params
        add("zeta", qz, lambda th, _: rows_z(th["zeta"]))
        add("alpha", len(afit.params),
            lambda th, _: alpha_3_system(table, spec, th["zeta"]).per_row(th["alpha"]))
        final = lambda th: delta_of(th["alpha"])
    elif estimator in ("delta2", "delta_b2", "delta_tr", "delta_b_tr"):
        values["beta"] = nu.beta
        add("zeta", qz, lambda th, _: rows_z(th["zeta"]))
        add("iota", qd, lambda th, _: rows_d(th["iota"]))
        if estimator in ("delta_tr", "delta_b_tr"):
            add("theta", qy, lambda th, _: rows_y(th["theta"]))
        add("beta", len(nu.beta),
            lambda th, _: beta_ipw_system(table, spec, th["iota"]).per_row(th["beta"]))

        def cov_weight(th):
            mu_d = predict_nuisance(table, spec, "mu_d", th["iota"])
            return _cov_denominator(table, spec, th["beta"], mu_d)

        if estimator == "delta2":
            def final(th):
                mu_z = predict_nuisance(table, spec, "mu_z", th["zeta"])
                return (table.z - mu_z) * table.y / cov_weight(th)
        elif estimator == "delta_b2":
            afit = estimate_alpha_2b(table, spec, nu.zeta, nu.iota, nu.beta)
            values["alpha"] = afit.params
            add("alpha", len(afit.params),
                lambda th, _: alpha_2b_system(
                    table, spec, th["zeta"], th["iota"], th["beta"]).per_row(th["alpha"]))
            final = lambda th: alpha2_projection(table, spec, th["alpha"])
        else:
            values["alpha"] = nu.alpha
            add("alpha", len(nu.alpha),
                lambda th, _: alpha_dr_system(
                    table, spec, th["zeta"], th["iota"], th["theta"], th["beta"],
                    phi2_mode=mode).per_row(th["alpha"]))
            if estimator == "delta_tr":
                def final(th):
                    mu_z = predict_nuisance(table, spec, "mu_z", th["zeta"])
                    mu_d = predict_nuisance(table, spec, "mu_d", th["iota"])
                    mu_y = predict_nuisance(table, spec, "mu_y", th["theta"])
                    dl = delta_of(th["alpha"])
                    e = table.y - mu_y - dl * (table.d - mu_d)
                    return (table.z - mu_z) * e / cov_weight(th) + dl
            else:
                final = lambda th: delta_of(th["alpha"])
    else:
        raise DataError(f"sandwich variance is not available for {estimator!r}")

    names = [name for name, _, _ in blocks]
    dims = [dim for _, dim, _ in blocks]
    offsets = np.concatenate([[0], np.cumsum(dims)])
    big0 = np.concatenate([values[name] for name in names])

    def rows_fn(big):
        th = {name: big[offsets[i]: offsets[i + 1]] for i, name in enumerate(names)}
        delta_hat = big[-1]
        parts = [fn(th, None) for (_, _, fn) in blocks]
        parts.append((final(th) - delta_hat)[:, None])
        return np.hstack(parts)

    # Fitted ATE solves the final moment exactly.
    delta_point = float(np.mean(final({n: values[n] for n in names})))
    return np.concatenate([big0, [delta_point]]), rows_fn


def sandwich_se(table: ObservationTable, spec: WorkingModelSpec, estimator: str) -> float:
    """M-estimation sandwich standard error for the ATE coordinate.

    Stacks the nuisance score equations under the estimator's own moment,
    differentiates the stacked mean numerically for the bread, and reads off
    the last diagonal entry of bread^-1 meat bread^-T / n.
    """
    big0, rows_fn = _stacked_rows(table, spec, estimator)
    n = table.n

    def mean_rows(big):
        return rows_fn(big).mean(axis=0)

    bread = fd_jacobian(mean_rows, big0)
    if np.linalg.cond(bread) > 1e12:
        raise RankDeficiencyError("sandwich bread matrix is numerically singular")
    g = rows_fn(big0)
    meat = g.T @ g / n
    binv = np.linalg.inv(bread)
    cov = binv @ meat @ binv.T / n
    return float(np.sqrt(cov[-1, -1]))
