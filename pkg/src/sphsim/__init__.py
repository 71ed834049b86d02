"""Simulation and verification toolkit for singular port-Hamiltonian systems.

The package models oscillators of the port-Hamiltonian form whose storage
function vanishes on an ellipsoidal level set, making the input gain singular
there.  It provides the closed-form math (`core`), passive load and controller
interconnections (`interconnect`), instrumented numerical integration with
event detection (`sim`), numerical audits of the dissipation, invariance, and
convergence claims (`audit`), and a scenario-driven command line front end
(`cli`).
"""

from .core import (
    Constancy,
    QuadraticForm,
    Region,
    RegionTag,
    SigmaLevel,
    SingularPHSystem,
    Variant,
    DEFAULT_SIGMA_TOL,
    classify_region,
    dissipation_rate,
    grad_hamiltonian,
    hamiltonian,
    output_map,
    sigma,
    sigma_inv,
    sigma_inv_lin,
    sigma_inv_sat,
    storage_lin,
    storage_sat,
    vector_field,
)
from .interconnect import (
    ClosedLoopSystem,
    LtiLoad,
    OpenLoopSignal,
    PhasePIController,
    StaticLoad,
    closed_loop_derivative,
    lti_load_step_derivative,
    phase_pi_jbar,
    realize_tf,
    static_load_eval,
)
from .sim import (
    Event,
    EventLog,
    IntegratorConfig,
    Trajectory,
    first_impact_time,
    integrate,
)
from .audit import (
    AuditCheck,
    AuditReport,
    ImpactBoundData,
    check_convergence_to_S,
    check_cycle_supply,
    check_forward_invariance,
    check_impact_bound,
    check_passivity,
    check_phase_tracking,
    check_structure,
    compute_impact_bound,
)

__version__ = "0.1.0"
