"""Semi-static bandwidth sharing between wireless operators.

Simulator and optimiser for the ABS policy (per-period resource allocation
with virtual queues, per-hyperperiod projected gradient on the sharing
matrix), its comparison baselines and the experiment harness.
"""

__version__ = "0.1.0"

from .kernels import BACKEND
from .model import (
    AllocationResult,
    PeriodSample,
    QualityModel,
    SharingMatrix,
    SystemConfig,
    VirtualQueueLedger,
    no_sharing_matrix,
    quality,
    quality_inverse,
    total_qoe,
    validate_sharing,
)
from .ra import RaProblem, brute_force_ra, per_client_best_response, solve_ra
from .scenario import (
    RegimeSwitch,
    RunTrace,
    ScenarioSpec,
    generate_period,
    improvement_over_no_sharing,
    mirrored_rates,
    percentile_satisfaction,
)
from .sharing import (
    AbsState,
    SolverError,
    abs_hyperperiod_step,
    project_onto_omega,
    run_abs,
    sharing_gradient,
    update_virtual_queues,
)
from .baselines import (
    PolicyKind,
    lemma3_gap,
    run_dynamic_proxy,
    run_no_sharing,
    solve_opt_ss_star,
)
