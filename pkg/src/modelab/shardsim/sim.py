"""Analytical step-latency model for SPMD and MPMD placements of a MoDE model.

Every cost is a linear form over five unknowns::

    theta = (1/flops_per_device, 1/bandwidth, latency, 1/cross_bandwidth, merge_overhead)

so a schedule's latency is piecewise linear in ``theta``. The simulator
keeps the linear form of the critical path next to its value, which is
what ``calibrate`` fits against. Integer work counts are carried as
``Fraction`` so the whole computation is exact when the cost parameters are
``Fraction`` too.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Iterable

import numpy as np

from ..model.config import ModeConfig

THETA = ("inv_flops", "inv_bandwidth", "latency", "inv_cross_bandwidth", "merge_overhead")
BACKBONE = "backbone"


class PlanError(ValueError):
    """Inconsistent sharding plan or device assignment."""


class CalibrationError(ValueError):
    """Observations cannot pin down the requested cost parameters."""


def expert_branch(j: int) -> str:
    return f"expert.{j}"


def model_branches(model: ModeConfig) -> list[str]:
    return [BACKBONE] + [expert_branch(j) for j in range(model.n_experts)]


# -- cost model ----------------------------------------------------------------------------

def _inv(v):
    return Fraction(1) / v if isinstance(v, Fraction) else 1.0 / v


@dataclass(frozen=True)
class CostModel:
    flops_per_device: float = 1.2e14
    bandwidth: float = 4.5e10          # intra-mesh all-reduce bytes/s
    latency: float = 2e-5              # per all-reduce message, seconds
    cross_bandwidth: float = 6e10      # inter-mesh reshard bytes/s
    merge_overhead: float = 2e-2       # fixed seconds per merge
    bytes_per_element: int = 2
    flops_per_token_layer: int = 24    # times d**2, one forward pass
    backward_factor: int = 3           # forward + backward = 3x forward
    n_devices: int = 8

    def __post_init__(self):
        for k in ("flops_per_device", "bandwidth", "latency", "cross_bandwidth", "merge_overhead"):
            if not getattr(self, k) > 0:
                raise PlanError(f"cost parameter {k} must be > 0, got {getattr(self, k)}")

    def theta(self) -> tuple:
        return (_inv(self.flops_per_device), _inv(self.bandwidth), self.latency,
                _inv(self.cross_bandwidth), self.merge_overhead)

    def with_theta(self, theta) -> "CostModel":
        t = [float(v) for v in theta]
        if min(t) <= 0:
            raise CalibrationError(f"fit produced a non-positive parameter: {dict(zip(THETA, t))}")
        return replace(self, flops_per_device=1 / t[0], bandwidth=1 / t[1], latency=t[2],
                       cross_bandwidth=1 / t[3], merge_overhead=t[4])

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, Fraction) else v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class Lin:
    """``coef . theta + const``; coefficients are exact rationals."""

    coef: tuple = (0, 0, 0, 0, 0)
    const: object = 0

    def __add__(self, other: "Lin") -> "Lin":
        return Lin(tuple(a + b for a, b in zip(self.coef, other.coef)), self.const + other.const)

    def times(self, k) -> "Lin":
        return Lin(tuple(a * k for a in self.coef), self.const * k)

    def value(self, theta):
        return sum((c * t for c, t in zip(self.coef, theta) if c), self.const)


ZERO = Lin()


def _unit(k: int, amount) -> Lin:
    coef = [0] * 5
    coef[k] = amount
    return Lin(tuple(coef))


def _check_degree(p: int, heads: int | None) -> None:
    if not isinstance(p, (int, np.integer)) or p < 1:
        raise PlanError(f"model-parallel degree must be a positive integer, got {p!r}")
    if heads is not None and heads % p:
        raise PlanError(f"model-parallel degree {p} does not divide {heads} heads")


def branch_cost_terms(layers: int, tokens: int, d: int, p: int, cost: CostModel,
                      heads: int | None = None, bandwidth=None, latency=None) -> tuple[Lin, Lin]:
    """Forward (compute, all-reduce) cost of ``layers`` layers sharded ``p`` ways.

    Compute is ``flops_per_token_layer * tokens * d**2`` per layer split over
    ``p`` devices. Each layer all-reduces its ``tokens x d`` activations with
    a ring: ``2(p-1)/p * bytes / bandwidth + latency``; nothing when p = 1.
    A mesh-specific ``bandwidth``/``latency`` enters as a constant instead of
    a fitted term.
    """
    _check_degree(p, heads)
    flops = Fraction(cost.flops_per_token_layer * tokens * d * d * layers, p)
    compute = _unit(0, flops)
    if p == 1 or layers == 0:
        return compute, ZERO
    ring = Fraction(2 * (p - 1) * tokens * d * cost.bytes_per_element * layers, p)
    bw_part = _unit(1, ring) if bandwidth is None else Lin(const=ring / bandwidth)
    lat_part = _unit(2, layers) if latency is None else Lin(const=latency * layers)
    return compute, bw_part + lat_part


def branch_compute_cost(layers: int, tokens: int, d: int, p: int, cost: CostModel,
                        heads: int | None = None):
    """Seconds for one forward pass of a branch; p = 1 is pure compute."""
    c, a = branch_cost_terms(layers, tokens, d, p, cost, heads)
    th = cost.theta()
    return c.value(th) + a.value(th)


# -- plans ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class DeviceMesh:
    name: str
    devices: tuple[int, ...]
    degree: int | None = None       # model-parallel degree, defaults to the device count
    bandwidth: float | None = None  # overrides the cost model's intra-mesh numbers
    latency: float | None = None

    @property
    def p(self) -> int:
        return len(self.devices) if self.degree is None else self.degree


@dataclass(frozen=True)
class ShardingPlan:
    kind: str                            # "spmd" | "mpmd"
    meshes: tuple[DeviceMesh, ...]
    assignment: dict = field(default_factory=dict)  # branch name -> mesh name
    name: str = ""

    def mesh(self, name: str) -> DeviceMesh:
        for m in self.meshes:
            if m.name == name:
                return m
        raise PlanError(f"assignment references unknown mesh {name!r}")

    def branches_on(self, mesh: str) -> list[str]:
        return sorted((b for b, m in self.assignment.items() if m == mesh), key=_branch_key)

    def validate(self, model: ModeConfig, n_devices: int | None = None) -> None:
        if self.kind not in ("spmd", "mpmd"):
            raise PlanError(f"plan kind must be spmd or mpmd, got {self.kind!r}")
        if not self.meshes:
            raise PlanError("plan has no meshes")
        names = [m.name for m in self.meshes]
        if len(set(names)) != len(names):
            raise PlanError(f"duplicate mesh names {names}")
        seen: set[int] = set()
        for m in self.meshes:
            if not m.devices:
                raise PlanError(f"mesh {m.name!r} is empty")
            if len(set(m.devices)) != len(m.devices) or seen & set(m.devices):
                raise PlanError(f"mesh {m.name!r} overlaps another mesh")
            seen |= set(m.devices)
            if m.p > len(m.devices):
                raise PlanError(f"mesh {m.name!r}: degree {m.p} exceeds {len(m.devices)} devices")
            _check_degree(m.p, model.n_heads)
        if n_devices is not None and max(seen) >= n_devices:
            raise PlanError(f"device id {max(seen)} outside a cluster of {n_devices}")
        want = set(model_branches(model))
        got = set(self.assignment)
        if want != got:
            raise PlanError(f"plan assigns {sorted(got)} but the model has branches {sorted(want)}")
        for b, m in self.assignment.items():
            self.mesh(m)
        idle = [m.name for m in self.meshes if not self.branches_on(m.name)]
        if idle:
            raise PlanError(f"meshes without any branch: {idle}")
        if self.kind == "spmd":
            if len(self.meshes) != 1:
                raise PlanError("an SPMD plan has exactly one mesh")
            if n_devices is not None and len(self.meshes[0].devices) != n_devices:
                raise PlanError("the SPMD mesh must contain every device")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name,
                "meshes": [asdict(m) | {"devices": list(m.devices)} for m in self.meshes],
                "assignment": dict(self.assignment)}

    @classmethod
    def from_dict(cls, d: dict) -> "ShardingPlan":
        try:
            meshes = tuple(DeviceMesh(m["name"], tuple(int(x) for x in m["devices"]),
                                      m.get("degree"), m.get("bandwidth"), m.get("latency"))
                           for m in d["meshes"])
            return cls(d["kind"], meshes, dict(d["assignment"]), d.get("name", ""))
        except (KeyError, TypeError) as exc:
            raise PlanError(f"malformed plan: {exc}") from exc


def _branch_key(b: str):
    return (0, 0) if b == BACKBONE else (1, int(b.split(".")[1]))


def spmd_plan(model: ModeConfig, n_devices: int = 8, name: str = "spmd") -> ShardingPlan:
    mesh = DeviceMesh("all", tuple(range(n_devices)))
    return ShardingPlan("spmd", (mesh,), {b: "all" for b in model_branches(model)}, name)


def mpmd_plan(groups: Iterable[tuple[Iterable[int], Iterable[str]]], name: str = "mpmd"
              ) -> ShardingPlan:
    """``groups`` lists (devices, branches) pairs; mesh names are m0, m1, ..."""
    meshes, assign = [], {}
    for k, (devs, branches) in enumerate(groups):
        meshes.append(DeviceMesh(f"m{k}", tuple(devs)))
        for b in branches:
            assign[b] = f"m{k}"
    return ShardingPlan("mpmd", tuple(meshes), assign, name)


# -- simulation ---------------------------------------------------------------------------------

@dataclass
class MeshTime:
    devices: int
    degree: int
    compute_s: object
    allreduce_s: object
    merge_s: object
    busy_s: object
    idle_s: object


@dataclass
class ScheduleReport:
    plan: str
    kind: str
    meshes: int
    merges: int
    expert_layers: int
    latency_s: object
    compute_s: object      # summed over meshes (wall time per mesh)
    allreduce_s: object
    reshard_s: object      # bytes / cross bandwidth, over all merges
    merge_sync_s: object   # fixed per-merge overhead, over all merges
    idle_s: object         # summed over meshes
    per_mesh: dict[str, MeshTime] = field(default_factory=dict)
    critical: Lin = ZERO   # linear form of latency_s in THETA

    @property
    def merge_s(self):
        return self.reshard_s + self.merge_sync_s

    def row(self) -> dict:
        f = float
        return {"plan": self.plan, "meshes": self.meshes, "expert_layers": self.expert_layers,
                "merges": self.merges, "latency_s": f(self.latency_s), "compute_s": f(self.compute_s),
                "allreduce_s": f(self.allreduce_s), "reshard_s": f(self.reshard_s),
                "idle_s": f(self.idle_s)}


def merge_terms(plan: ShardingPlan, model: ModeConfig, tokens: int, cost: CostModel) -> tuple[Lin, Lin]:
    """(reshard, fixed) cost of one merge.

    Each branch output of ``tokens x d`` values travels to every other mesh,
    once forward and once as a gradient on the way back. Meshes receive in
    parallel, so the slowest receiver sets the time. One mesh needs no merge.
    """
    if plan.kind == "spmd" or len(plan.meshes) == 1:
        return ZERO, ZERO
    act = tokens * model.d_model * cost.bytes_per_element
    incoming = max(sum(1 for b, m in plan.assignment.items() if m != dst.name) for dst in plan.meshes)
    return _unit(3, 2 * incoming * act), _unit(4, 1)


def simulate_step(plan: ShardingPlan, model: ModeConfig, cost: CostModel, merges: int | None = None,
                  batch_size: int = 1) -> ScheduleReport:
    """Latency of one training step.

    SPMD runs every branch of every block one after another on the full
    mesh. MPMD runs each mesh's branches for a block while the other meshes
    do the same, waits for the slowest mesh, then merges. Branch costs are
    scaled by ``backward_factor`` for the backward pass; merges carry their
    own forward and backward payload.
    """
    if merges is None:
        merges = model.n_blocks
    if merges != model.n_blocks:
        raise PlanError(f"merges ({merges}) must equal n_blocks ({model.n_blocks})")
    plan.validate(model, cost.n_devices)
    tokens = batch_size * model.seq_len
    th = cost.theta()
    lb = model.backbone_layers_per_block
    le = model.expert_layers_per_block

    per_block: dict[str, tuple[Lin, Lin]] = {}
    for m in plan.meshes:
        c, a = ZERO, ZERO
        for b in plan.branches_on(m.name):
            layers = lb if b == BACKBONE else le
            bc, ba = branch_cost_terms(layers, tokens, model.d_model, m.p, cost, model.n_heads,
                                       m.bandwidth, m.latency)
            c, a = c + bc, a + ba
        per_block[m.name] = (c.times(cost.backward_factor), a.times(cost.backward_factor))
    reshard, sync = merge_terms(plan, model, tokens, cost)
    merge = reshard + sync

    # advance mesh clocks block by block; every mesh waits for the merge
    clock = ZERO
    for _ in range(model.n_blocks):
        if plan.kind == "spmd":
            (c, a), = per_block.values()
            clock = clock + c + a
            continue
        finish = [clock + c + a for c, a in per_block.values()]
        clock = max(finish, key=lambda f: f.value(th)) + merge
    latency = clock.value(th)

    nb = model.n_blocks
    per_mesh = {}
    for m in plan.meshes:
        c, a = per_block[m.name]
        cv, av = c.value(th) * nb, a.value(th) * nb
        mv = merge.value(th) * nb
        busy = cv + av + mv
        idle = latency - busy
        if idle < 0 and -idle <= 1e-12 * latency:  # float rounding only
            idle = latency * 0
        per_mesh[m.name] = MeshTime(len(m.devices), m.p, cv, av, mv, busy, idle)
    return ScheduleReport(
        plan=plan.name or plan.kind, kind=plan.kind, meshes=len(plan.meshes), merges=merges,
        expert_layers=model.n_experts * le * nb, latency_s=latency,
        compute_s=sum(t.compute_s for t in per_mesh.values()),
        allreduce_s=sum(t.allreduce_s for t in per_mesh.values()),
        reshard_s=reshard.value(th) * nb, merge_sync_s=sync.value(th) * nb,
        idle_s=sum(t.idle_s for t in per_mesh.values()), per_mesh=per_mesh, critical=clock)


# -- calibration ----------------------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    plan: ShardingPlan
    model: ModeConfig
    latency_s: float
    batch_size: int = 1


@dataclass
class Calibration:
    cost: CostModel
    residuals: list[float]
    iterations: int


def calibrate(cost: CostModel, observations: list[Observation], free: Iterable[str] = THETA,
              max_iter: int = 50) -> Calibration:
    """Least-squares fit of the ``free`` entries of THETA to observed step latencies.

    The critical path is re-derived after each solve and the fit repeated
    until the path stops changing. Entries not in ``free`` keep their value
    from ``cost``.
    """
    free = [THETA.index(f) for f in free]
    if not free or len(set(free)) != len(free):
        raise CalibrationError("free parameters must be a non-empty set of THETA names")
    if len(observations) < len(free):
        raise CalibrationError(f"{len(observations)} observations cannot determine {len(free)} parameters")
    theta = [float(v) for v in cost.theta()]
    fixed = [k for k in range(5) if k not in free]
    y = np.array([float(o.latency_s) for o in observations])
    prev = None
    for it in range(1, max_iter + 1):
        cur = cost.with_theta(theta)
        forms = [simulate_step(o.plan, o.model, cur, batch_size=o.batch_size).critical
                 for o in observations]
        A = np.array([[float(f.coef[k]) for k in free] for f in forms])
        rhs = y - np.array([float(f.const) + sum(float(f.coef[k]) * theta[k] for k in fixed)
                            for f in forms])
        # scale columns so parameters of very different magnitude are comparable
        norms = np.linalg.norm(A, axis=0)
        if np.any(norms == 0) or np.linalg.matrix_rank(A / norms) < len(free):
            raise CalibrationError("observations do not determine every free parameter (rank-deficient)")
        sol, *_ = np.linalg.lstsq(A / norms, rhs, rcond=None)
        for k, v in zip(free, sol / norms):
            theta[k] = float(v)
        key = tuple(f.coef for f in forms)
        if key == prev:
            break
        prev = key
    fitted = cost.with_theta(theta)
    res = [float(o.latency_s) - float(simulate_step(o.plan, o.model, fitted, batch_size=o.batch_size)
                                      .latency_s) for o in observations]
    return Calibration(fitted, res, it)
