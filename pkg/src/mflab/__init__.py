"""mflab: a Monte Carlo laboratory for mean-field particle systems.

Simulates interacting and mean-field-driven SDE ensembles under shared
noise, evaluates the drift-mismatch functionals that upper-bound path-space
KL divergences, checks the explicit constants and inequalities attached to
them, and validates every estimator against an exact Gaussian oracle.
"""

from .errors import (
    ConfigError,
    DegenerateDiffusion,
    DimensionMismatch,
    GridMismatch,
    MflabError,
    NumericalBlowup,
    OraclePDFailure,
    SupportViolation,
    TooFewParticles,
    UnboundedKernel,
)
from .model import (
    ConstantKernel,
    DeterministicPoint,
    EmpiricalInit,
    GaussBumpKernel,
    GaussianIID,
    InitialLaw,
    Kernel,
    LinearKernel,
    RngPolicy,
    SineKernel,
    SystemParams,
    TimeGrid,
    ZeroKernel,
    kernel_eval,
    kernel_sup_norm,
    lambda_min_of,
)
from .engine import (
    NoisePath,
    PathBundle,
    ReferenceCloud,
    build_reference_cloud,
    extract_noise_theta1,
    extract_noise_theta2,
    meanfield_drift,
    read_cloud,
    replay_paths,
    run_ensemble,
    simulate_interacting_1st,
    simulate_interacting_2nd,
    simulate_meanfield_driven,
    solution_map_phi,
    time_marginal,
    write_cloud,
)
from .girsanov import (
    DriftMismatch,
    FunctionalEstimate,
    KLBoundResult,
    TheoryConstants,
    drift_mismatch,
    forward_kl_bound,
    log_rn_derivative,
    reversed_explicit_bound,
    reversed_kl_functional,
    rn_martingale,
    theory_bound_curve,
    theory_constants,
)
from .info_metrics import (
    Channel,
    ConcentrationReport,
    DiscreteMeasure,
    GaussianMeasure,
    concentration_suite,
    dpi_check,
    f_divergence,
    fenchel_young_check,
    gaussian_kl,
    knn_kl_estimate,
    linear_scaling_check,
    mz_inequality_check,
    pinsker_tv,
    sine_product_differences,
)
from .oracle import (
    ExchangeableGaussian,
    MeanFieldTrajectory,
    OracleTrajectory,
    dense_covariance,
    dense_gaussian_kl,
    dense_lyapunov_interacting,
    exact_joint_kl,
    exact_marginal_kl,
    meanfield_variance_closed_form,
    propagate_interacting,
    propagate_meanfield,
)

__version__ = "0.1.0"
