"""exitlab: exact simulation, action functionals, and exit-measure
experiments for density-dependent epidemic jump processes.

The package is organized around one pipeline: build a model
(models.build_model), simulate its scaled jump process exactly
(ssa.simulate), trace the characteristic boundary of the endemic basin
(basin.trace_boundary), price boundary points by the Hamiltonian "cost
to reach" (action, quasipotential), and confront that price list with
Monte Carlo exit samples (experiment).  The cli module exposes the same
steps as subcommands.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DegenerateSpectrum,
    EmptyLattice,
    ExitlabError,
    InfiniteAction,
    InsufficientData,
    IoFailure,
    NegativeInput,
    NoConnection,
    NonConvergence,
    OutOfDomain,
    RegimeViolation,
    RootFindFailure,
    StepUnderflow,
    TraceFailure,
    UnknownModel,
)
from .models import (
    BUILTIN_MODELS,
    DomainSpec,
    Equilibrium,
    ModelSpec,
    build_model,
    check_positive_span,
    drift,
    drift_jacobian,
    equilibria,
    in_domain,
    rates_and_gradients,
    sample_domain,
)
from .ssa import (
    ExitRecord,
    JumpPath,
    exit_experiment,
    path_to_csv,
    project_initial,
    records_to_csv,
    simulate,
)
from .basin import (
    BoundaryTrace,
    SmoothPath,
    TraceLocator,
    characteristic_check,
    classify_basin,
    integrate_ode,
    trace_boundary,
    trace_to_csv,
)
from .action import (
    ActionValue,
    lagrangian,
    lagrangian_many,
    path_action,
    reduced_hamiltonian,
    relative_entropy_f,
    velocity_decomposition,
)
from .quasipotential import (
    HamiltonianPoint,
    ProfileTable,
    QuasipotentialResult,
    boundary_profile,
    extended_rhs,
    hamiltonian_rhs,
    linearize_at_equilibrium,
    minimize_discrete_action,
    shoot_heteroclinic,
)
from .experiment import (
    NEAR_CRITICAL_SIRS,
    ExitBatch,
    ExitMeasureReport,
    ScalingFit,
    run_exit_measure,
    scaling_estimate,
    write_report,
)
from .config import RunConfig, load_file, resolve

__all__ = [
    "__version__",
    # errors
    "ExitlabError", "UnknownModel", "RegimeViolation", "OutOfDomain",
    "RootFindFailure", "EmptyLattice", "StepUnderflow", "TraceFailure",
    "NegativeInput", "NonConvergence", "InfiniteAction",
    "DegenerateSpectrum", "NoConnection", "InsufficientData", "IoFailure",
    "ConfigError",
    # models
    "BUILTIN_MODELS", "DomainSpec", "ModelSpec", "Equilibrium",
    "build_model", "rates_and_gradients", "drift", "drift_jacobian",
    "equilibria", "check_positive_span", "in_domain", "sample_domain",
    # ssa
    "ExitRecord", "JumpPath", "project_initial", "simulate",
    "exit_experiment", "path_to_csv", "records_to_csv",
    # basin
    "SmoothPath", "BoundaryTrace", "TraceLocator", "integrate_ode",
    "classify_basin", "trace_boundary", "characteristic_check",
    "trace_to_csv",
    # action
    "ActionValue", "relative_entropy_f", "reduced_hamiltonian",
    "lagrangian", "lagrangian_many", "velocity_decomposition",
    "path_action",
    # quasipotential
    "HamiltonianPoint", "hamiltonian_rhs", "extended_rhs",
    "linearize_at_equilibrium", "QuasipotentialResult",
    "shoot_heteroclinic", "minimize_discrete_action", "ProfileTable",
    "boundary_profile",
    # experiment
    "NEAR_CRITICAL_SIRS", "ExitBatch", "ExitMeasureReport", "ScalingFit",
    "run_exit_measure", "scaling_estimate", "write_report",
    # config
    "RunConfig", "load_file", "resolve",
]
