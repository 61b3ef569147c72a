"""Shard-placement simulator: per-step latency of SPMD and MPMD plans."""
from .scenarios import (
    REFERENCE_MODEL,
    SweepRow,
    default_cost,
    five_mesh,
    one_mesh,
    reference_model,
    resharding_table,
    sweep_expert_size,
    sweep_merges,
    three_mesh,
    two_expert_plan,
)
from .sim import (
    BACKBONE,
    THETA,
    Calibration,
    CalibrationError,
    CostModel,
    DeviceMesh,
    Lin,
    MeshTime,
    Observation,
    PlanError,
    ScheduleReport,
    ShardingPlan,
    branch_compute_cost,
    branch_cost_terms,
    calibrate,
    expert_branch,
    merge_terms,
    model_branches,
    mpmd_plan,
    simulate_step,
    spmd_plan,
)

__all__ = [
    "BACKBONE", "Calibration", "CalibrationError", "CostModel", "DeviceMesh", "Lin", "MeshTime",
    "Observation", "PlanError", "REFERENCE_MODEL", "ScheduleReport", "ShardingPlan", "SweepRow",
    "THETA", "branch_compute_cost", "branch_cost_terms", "calibrate", "default_cost",
    "expert_branch", "five_mesh", "merge_terms", "model_branches", "mpmd_plan", "one_mesh",
    "reference_model", "resharding_table", "simulate_step", "spmd_plan", "sweep_expert_size",
    "sweep_merges", "three_mesh", "two_expert_plan",
]
