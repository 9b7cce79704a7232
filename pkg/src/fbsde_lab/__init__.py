"""fbsde-lab: a numerical laboratory for path-dependent coupled FBSDEs.

Solves coupled forward-backward SDEs on certified small intervals by Picard
iteration, patches local solutions into a global one through a regression
decoupling field, bounds the field's Lipschitz schedule with dominating
(Riccati) ODEs, and verifies a-priori and stability estimates at desk scale.
"""

from .path_space import (
    DiscretePath,
    PathEnsemble,
    TimeGrid,
    path_concat,
    path_distance_sq,
    path_norm_sq,
)
from .problem import (
    FBSDEProblem,
    LipschitzData,
    CoeffLipschitz,
    ProblemClass,
    REGISTRY,
    check_monotonicity_condition,
    check_small_time_condition,
    classify,
    decoupled_brownian,
    delarue,
    fromm_imkeller,
    integral_terminal,
    make_problem,
    probe_lipschitz,
    with_driver_shift,
)
from .sde_engine import ArrayCandidate, BrownianBatch, ZeroCandidate, generate_brownian, simulate_forward
from .bsde_engine import (
    BackwardSolution,
    FeatureBasis,
    RegressionConfig,
    condexp_regress,
    estimate_z,
    make_basis,
    solve_backward,
)
from .picard_solver import (
    ContractionConstants,
    LocalSolution,
    PicardConfig,
    contraction_constants,
    gamma_small_time_limit,
    local_solve,
    solution_norm_sq,
    terminal_from_problem,
)
from .step_planner import IntervalRecord, PlannerConfig, StepPlan, max_local_interval, plan_steps
from .dominating_ode import (
    CharacteristicCoefficients,
    CharacteristicInputs,
    CoefficientBounds,
    DominatingODE,
    ODESolution,
    build_dominating_ode,
    characteristic_coefficients,
    coefficient_bounds,
    integrate_backward,
    t_max_for_lipschitz,
)
from .global_solver import (
    DecouplingField,
    GlobalConfig,
    GlobalSolution,
    apriori_bound_check,
    build_decoupling_field,
    eval_field,
    solve_global,
)
from .stability import StabilityReport, delta_i0, stability_report
from .errors import (
    ConvergenceError,
    FbsdeError,
    InfeasibleError,
    NumericalError,
    RegressionError,
    SimulationError,
    UsageError,
)

__version__ = "0.1.0"
