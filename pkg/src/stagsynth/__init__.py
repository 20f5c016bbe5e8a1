"""Intercept-augmented synthetic control for staggered adoption panels."""


from .certificate import BoundCertificate, certify, dispersion, estimate_kappa, theorem1_bound
from .diagnostics import effective_donor_counts, placebo_gaps, window_sensitivity
from .errors import StagSynthError, ValidationError
from .estimator import AttEstimate, att_by_event_time, att_time_average, unit_effect
from .imbalance import (
    ImbalanceReport,
    WeightMatrix,
    gamma_residual,
    imbalance_report,
    objective,
    objective_gradient,
    q_pool_sq,
    q_sep_sq,
)
from .panel import (
    DonorRule,
    Panel,
    PanelSummary,
    demeaned_series,
    donor_pool,
    dump_panel,
    load_panel,
    sample_panel,
    summarize,
)
from .simlab import DgpConfig, EstimatorConfig, generate_panel, run_monte_carlo
from .solver import SolverConfig, WeightSolution, lambda_schedule, project_simplex, solve_weights

__version__ = "0.1.0"
