"""Queue-aware joint placement, routing and resource allocation for
service chains on edge-cloud networks."""

__version__ = "0.1.0"

from .model import (
    Allocation,
    AugmentedEdge,
    AugmentedGraph,
    CommLinkParams,
    Commodity,
    ComputeParams,
    ComputeSystem,
    EdgeKind,
    EdgeParams,
    FlowAssignment,
    NetworkGraph,
    QueueModel,
    Resource,
    Scenario,
    ServiceGraph,
    StructuralError,
    arrival_rates,
    build_augmented_graph,
    validate_scenario,
)
from .queueing import (
    DelayMode,
    DelayReport,
    InstabilityError,
    QueueLoad,
    CommodityLoad,
    end_to_end_latency,
    eps_bound_sojourn,
    mg1_components,
    mg1_sojourn,
    mm1_sojourn,
)
from .optimizer import (
    SafetyMargins,
    Solution,
    SolveOptions,
    SolverError,
    assemble_P1,
    assemble_P2,
    baseline_private_model,
    brute_force_optimum,
    finalize_allocation,
    objective_cost,
    solve_convex,
    sparq_solve,
)
from .rounding import RoundingError, decompose_service, round_flows
from .scenarios import (
    SCHEMA_VERSION,
    SweepResult,
    SweepRow,
    SweepSpec,
    apply_sweep_point,
    emit_tradeoff,
    experiment_a_scenario,
    experiment_b_scenario,
    load_scenario,
    run_sweep,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
)
from .simulator import SimConfig, SimResult, simulate_queue, simulate_solution

__all__ = [name for name in dir() if not name.startswith("_")]
