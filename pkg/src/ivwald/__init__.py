"""Average treatment effect estimation with continuous or categorical instruments.

Triply robust and bounded estimators built from variation-independent
working models, the Riesz-representer toolkit behind them, and a replicated
simulation harness with deterministic seeding.
"""

from .data import (
    Link,
    NuisanceModel,
    ObservationTable,
    Scenario,
    ScenarioSpec,
    WorkingModelSpec,
    ZKind,
    design,
    dichotomize,
    load_csv,
    validate,
)
from .equations import (
    EquationFit,
    MomentSystem,
    estimate_alpha_1,
    estimate_alpha_2b,
    estimate_alpha_3,
    estimate_alpha_dr,
    estimate_beta_ipw,
)
from .errors import (
    ConvergenceError,
    DataError,
    DegenerateEquationError,
    IvwaldError,
    PositivityError,
    RankDeficiencyError,
    RepresenterError,
    SeparationError,
    SimulationError,
    SingularJacobianError,
)
from .estimators import (
    ESTIMATOR_IDS,
    EstimateResult,
    NuisanceEstimates,
    bootstrap,
    crude_rd,
    delta_1,
    delta_2,
    delta_3,
    delta_b2,
    delta_b_tr,
    delta_tr,
    estimate_suite,
    fit_nuisances,
    point_estimate,
    residual_e,
    sandwich_se,
    tsls,
)
from .glm import FitResult, fit_linear, fit_logistic
from .newton import SolveReport, solve
from .riesz import (
    ConditionalLaw,
    RepresenterFn,
    WeightFn,
    categorical_law,
    conditional_mean,
    dichotomization_rr,
    gaussian_law,
    roundtrip_max_error,
    rr_categorical,
    rr_continuous,
    uniform_law,
    verify_representation,
    weight_from_rr,
)
from .simulate import (
    DgpParams,
    SimulatedData,
    SimulationReport,
    bridge_noise,
    gen_setting1,
    gen_setting2,
    run_scenarios,
    true_ate,
)

__version__ = "0.1.0"
