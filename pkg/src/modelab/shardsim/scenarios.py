"""Reference placements on an 8-device cluster and the sweeps built on them."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from ..model.config import ModeConfig
from .sim import (
    BACKBONE,
    CostModel,
    Observation,
    PlanError,
    ScheduleReport,
    ShardingPlan,
    calibrate,
    expert_branch,
    mpmd_plan,
    simulate_step,
    spmd_plan,
)

# a 1.5B-class decoder: 18 layers of width 2304
REFERENCE_MODEL = ModeConfig(vocab_size=256, d_model=2304, n_heads=48, n_backbone_layers=18,
                             n_blocks=2, expert_layers_per_block=3, n_experts=4, seq_len=2048)
REFERENCE_BATCH = 4

# measured single-mesh step latency that sets the default model's scale (seconds)
REFERENCE_SPMD_S = 0.329
# communication and merge parameters of the default model; only throughput is fitted
BASE_COST = CostModel()


def reference_model(n_experts: int = 4, expert_layers: int = 6, n_blocks: int = 2) -> ModeConfig:
    """Reference backbone with ``n_experts`` experts of ``expert_layers`` layers each."""
    if expert_layers % n_blocks or REFERENCE_MODEL.n_backbone_layers % n_blocks:
        raise PlanError(f"{expert_layers} expert layers cannot be split into {n_blocks} blocks")
    return REFERENCE_MODEL.with_(n_experts=n_experts, n_blocks=n_blocks,
                                 expert_layers_per_block=expert_layers // n_blocks)


def experts(n: int) -> list[str]:
    return [expert_branch(j) for j in range(n)]


def one_mesh(model: ModeConfig) -> ShardingPlan:
    return spmd_plan(model, 8, "1-mesh")


def three_mesh() -> ShardingPlan:
    """Backbone on 4 devices, experts in pairs on two 2-device meshes."""
    return mpmd_plan([(range(4), [BACKBONE]), ((4, 5), experts(4)[:2]), ((6, 7), experts(4)[2:])],
                     "3-mesh")


def five_mesh() -> ShardingPlan:
    """Backbone on 4 devices, one device per expert."""
    return mpmd_plan([(range(4), [BACKBONE])] + [((4 + j,), [expert_branch(j)]) for j in range(4)],
                     "5-mesh")


def two_expert_plan() -> ShardingPlan:
    """Backbone on 6 devices, each of two experts on its own device."""
    return mpmd_plan([(range(6), [BACKBONE]), ((6,), [expert_branch(0)]), ((7,), [expert_branch(1)])],
                     "6+1+1")


@lru_cache(maxsize=1)
def default_cost() -> CostModel:
    """``BASE_COST`` with throughput fitted to the single-mesh reference latency."""
    m = reference_model()
    obs = [Observation(one_mesh(m), m, REFERENCE_SPMD_S, REFERENCE_BATCH)]
    return calibrate(BASE_COST, obs, free=("inv_flops",)).cost


# -- sweeps ------------------------------------------------------------------------------------------

@dataclass
class SweepRow:
    point: int
    spmd: ScheduleReport
    mpmd: ScheduleReport

    @property
    def spmd_s(self) -> float:
        return float(self.spmd.latency_s)

    @property
    def mpmd_s(self) -> float:
        return float(self.mpmd.latency_s)

    @property
    def speedup(self) -> float:
        return self.spmd_s / self.mpmd_s

    @property
    def mpmd_idle(self) -> dict[str, float]:
        return {k: float(t.idle_s) for k, t in self.mpmd.per_mesh.items()}

    def row(self) -> dict:
        out = {"point": self.point}
        out.update(self.mpmd.row())
        out["spmd_latency_s"] = self.spmd_s
        out["speedup"] = self.speedup
        out.update({f"idle_{k}_s": v for k, v in self.mpmd_idle.items()})
        return out


def _compare(plan: ShardingPlan, model: ModeConfig, cost: CostModel, batch: int, point: int) -> SweepRow:
    spmd = simulate_step(spmd_plan(model, cost.n_devices), model, cost, batch_size=batch)
    return SweepRow(point, spmd, simulate_step(plan, model, cost, batch_size=batch))


def sweep_expert_size(plan: ShardingPlan, model: ModeConfig, sizes, cost: CostModel | None = None,
                      batch_size: int = REFERENCE_BATCH) -> list[SweepRow]:
    """SPMD against ``plan`` for each expert block size (layers per expert per block)."""
    cost = default_cost() if cost is None else cost
    return [_compare(plan, model.with_(expert_layers_per_block=s), cost, batch_size, s) for s in sizes]


def sweep_merges(plan: ShardingPlan, model: ModeConfig, merges, cost: CostModel | None = None,
                 batch_size: int = REFERENCE_BATCH) -> list[SweepRow]:
    """SPMD against ``plan`` as the fixed total depth is split into more blocks."""
    cost = default_cost() if cost is None else cost
    total_bb = model.n_backbone_layers
    total_ex = model.expert_layers_per_block * model.n_blocks
    rows = []
    for k in merges:
        if k < 1 or total_bb % k or total_ex % k:
            raise PlanError(f"{k} merges do not divide {total_bb} backbone / {total_ex} expert layers")
        m = model.with_(n_blocks=k, expert_layers_per_block=total_ex // k)
        rows.append(_compare(plan, m, cost, batch_size, k))
    return rows


def resharding_table(cost: CostModel | None = None, batch_size: int = REFERENCE_BATCH) -> list[dict]:
    """The 4-expert, 6-layer model under the 1-, 3- and 5-mesh placements."""
    cost = default_cost() if cost is None else cost
    m = reference_model()
    rows = []
    for plan in (one_mesh(m), three_mesh(), five_mesh()):
        rows.append(simulate_step(plan, m, cost, batch_size=batch_size).row())
    base = rows[0]["latency_s"]
    for r in rows:
        r["speedup"] = base / r["latency_s"]
    return rows
