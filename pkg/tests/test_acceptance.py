"""Acceptance gate: criteria 1 to 10, each reported as one PASS/FAIL line in the session summary.

The training criteria (3 to 7) use the QUICK desk profile and share one frozen backbone,
so the whole file runs in roughly ten minutes on a laptop CPU.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import re
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import fd_grad_errors, randomize, record_criterion, tiny_cfg
from modelab.cli import main
from modelab.model import LoraConfig, ModeModel, attach_lora, backbone_logits, permute_experts
from modelab.shardsim import (
    CostModel,
    default_cost,
    five_mesh,
    one_mesh,
    reference_model,
    simulate_step,
    sweep_expert_size,
    sweep_merges,
    three_mesh,
    two_expert_plan,
)
from modelab.tensor import Tensor, cross_entropy, no_grad
from modelab.tensor import checkpoint as ck
from modelab.training import compose, expert_params, train_expert
from modelab.training.experiments import (
    QUICK,
    ablate_mode_configs,
    build_backbone,
    build_corpora,
    expert_seed,
    lora_sweep,
    table1,
)
from schedule_oracle import oracle_latencies, small_plans

SEEDS = (0, 1, 2)
NOISE = 0.005  # 0.5 percentage points


def _pp(x: float) -> str:
    return f"{100 * x:.2f}"


@pytest.fixture(scope="module")
def quick_backbone():
    return build_backbone(QUICK)


# -- 1 ------------------------------------------------------------------------------------------

def test_criterion_01_gradients_match_finite_differences():
    t0 = time.perf_counter()
    model = randomize(ModeModel.init(tiny_cfg()), seed=0, std=0.2)
    model.set_trainable("all")
    toks = np.random.default_rng(1).integers(0, model.cfg.vocab_size, size=(2, 5))

    def loss():
        return cross_entropy(model.forward(toks[:, :-1]), toks[:, 1:])

    errs = fd_grad_errors(loss, model.params, eps=1e-5)
    worst = max(errs, key=errs.get)
    elapsed = time.perf_counter() - t0
    ok = errs[worst] < 1e-4 and elapsed < 60
    record_criterion(1, ok, f"{len(errs)} tensors, worst rel err {errs[worst]:.2e} ({worst}), "
                            f"{elapsed:.1f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------------------------

def test_criterion_02_structural_suite():
    rng = np.random.default_rng(2)
    notes = []
    # (a) no experts: bit-equal to the plain backbone
    m0 = randomize(ModeModel.init(tiny_cfg(n_experts=0, precision="float32")), seed=3)
    toks = rng.integers(0, 32, size=(3, 4))
    a = bool(np.array_equal(m0.logits(toks), backbone_logits(m0, toks)))
    notes.append(f"a={a}")
    # (b) gate rows are distributions
    m = randomize(ModeModel.init(tiny_cfg(n_experts=3)), seed=4, std=1.0)
    x = Tensor(rng.standard_normal((5, 4, 8)))
    al = m.gate_forward(0, x).alphas.data
    b = bool(np.all(np.abs(al.sum(-1) - 1) <= 1e-6) and np.all(al >= 0))
    notes.append(f"b={b}")
    # (c) expert permutation with gate columns
    m32 = randomize(ModeModel.init(tiny_cfg(n_experts=3, precision="float32")), seed=5)
    c = all(np.array_equal(m32.logits(toks), permute_experts(m32, list(p)).logits(toks))
            for p in itertools.permutations(range(3)))
    notes.append(f"c={c}")
    # (d) a saturated gate reproduces the selected branch
    worst = 0.0
    for j in range(3):
        m.params["gates.0.w"].data[:] = 0
        bias = np.zeros(4)
        bias[j] = 40.0
        m.params["gates.0.b"].data = bias
        xb = Tensor(rng.standard_normal((4, 8)))
        with no_grad():
            y = m.block_forward(0, xb).data
            want = m.backbone_branch(0, xb).data if j == 0 else m.expert_branch(0, j - 1, xb).data
        worst = max(worst, float(np.abs(y - want).max()))
    d = worst <= 1e-4
    notes.append(f"d={d} (max dev {worst:.1e})")
    ok = a and b and c and d
    record_criterion(2, ok, " ".join(notes))
    assert ok


# -- 3 ------------------------------------------------------------------------------------------

def _bytes(model, group: str = "backbone") -> str:
    return ck.params_hash({n: t.data for n, t in model.named(group).items()})


def test_criterion_03_freeze_soundness(quick_backbone):
    t0 = time.perf_counter()
    data = build_corpora(QUICK, 0)
    bb_before = _bytes(quick_backbone)
    cfg = QUICK.model.with_(seed=QUICK.backbone_seed, n_experts=1)
    steps = 500
    experts = [train_expert(quick_backbone, data.train[d], cfg,
                            QUICK.spec(steps, expert_seed(0, d))).model for d in ("math", "code")]
    stage1 = all(_bytes(e) == bb_before for e in experts)
    stage1 = stage1 and _bytes(quick_backbone) == bb_before
    before = [ck.params_hash(expert_params(e)) for e in experts]
    model = compose(quick_backbone, experts, data.mixture, QUICK.spec(QUICK.stage2_steps, 0),
                    "frozen", gate_backbone_bias=QUICK.compose_gate_bias).model
    after = [ck.params_hash(expert_params(model, j)) for j in range(2)]
    frozen = after == before and _bytes(model) == bb_before
    elapsed = time.perf_counter() - t0
    ok = stage1 and frozen and elapsed < 300
    record_criterion(3, ok, f"backbone bytes kept after {steps} stage-1 steps: {stage1}; "
                            f"expert bytes kept by frozen composition: {frozen}; {elapsed:.0f}s")
    assert ok


# -- 4 and 5 ------------------------------------------------------------------------------------

METHODS = ("full-ft", "mode-1x-uninit", "mode-2x-frozen", "mode-2x-experts")


@pytest.fixture(scope="module")
def table1_means(quick_backbone):
    acc: dict[str, list[dict]] = {}
    for s in SEEDS:
        for rep in table1(QUICK, s, backbone=quick_backbone, methods=METHODS):
            acc.setdefault(rep.label, []).append({**rep.accuracy, "average": rep.average})
    return {m: {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} for m, rows in acc.items()}


def test_criterion_04_retention_direction(table1_means):
    mode = table1_means["mode-2x-experts"]["english"]
    ft = table1_means["full-ft"]["english"]
    ok = mode >= ft - NOISE
    record_criterion(4, ok, f"english: MoDE 2x experts {_pp(mode)} vs full FT {_pp(ft)} "
                            f"(backbone {_pp(table1_means['backbone']['english'])}), 3 seeds")
    assert ok


def test_criterion_05_composition_benefit(table1_means):
    best = table1_means["mode-2x-experts"]["average"]
    others = {m: table1_means[m]["average"] for m in ("mode-2x-frozen", "mode-1x-uninit")}
    ok = all(best >= v - NOISE for v in others.values())
    detail = ", ".join(f"{m} {_pp(v)}" for m, v in others.items())
    record_criterion(5, ok, f"average: MoDE 2x experts {_pp(best)} vs {detail}, 3 seeds")
    assert ok


# -- 6 ------------------------------------------------------------------------------------------

def test_criterion_06_expert_depth_trend(quick_backbone):
    code: dict[int, list[float]] = {1: [], 2: []}
    for s in SEEDS:
        for rep in ablate_mode_configs(QUICK, s, blocks=(3,), layers=(1, 2), backbone=quick_backbone):
            code[rep.extra["layers"]].append(rep.accuracy["code"])
    one, two = float(np.mean(code[1])), float(np.mean(code[2]))
    ok = two >= one - NOISE
    record_criterion(6, ok, f"code accuracy at 3 blocks: 1 layer {_pp(one)}, 2 layers {_pp(two)}, "
                            f"3 seeds")
    assert ok


# -- 7 ------------------------------------------------------------------------------------------

def test_criterion_07_lora_noop_and_plateau(quick_backbone):
    m = ModeModel(quick_backbone.cfg, {n: a.copy() for n, a in quick_backbone.state_dict().items()})
    data = build_corpora(QUICK, 0)
    toks = data.test["code"].tokens[:8, :-1]
    before = m.logits(toks)
    attach_lora(m, LoraConfig(rank=8, apply_to_ffn=True, apply_to_embeddings=True))
    noop = bool(np.array_equal(before, m.logits(toks)))
    reps = lora_sweep(QUICK, 0, ranks=(8, 64, 512), backbone=quick_backbone, allow_overcomplete=True)
    code = {r.extra["rank"]: r.accuracy["code"] for r in reps}
    gap = max(code.values()) - code[512]
    ok = noop and gap >= -NOISE
    shown = ", ".join(f"r{k} {_pp(v)}" for k, v in code.items())
    record_criterion(7, ok, f"fresh adapters bit-exact no-op: {noop}; code accuracy {shown}; "
                            f"best minus r512 {_pp(gap)} pp")
    assert ok


# -- 8 ------------------------------------------------------------------------------------------

def test_criterion_08_simulator_matches_exhaustive_oracle():
    from dataclasses import replace
    from fractions import Fraction

    from modelab.model import ModeConfig

    t0 = time.perf_counter()
    costs = [
        CostModel(flops_per_device=Fraction(10**9), bandwidth=Fraction(10**6),
                  latency=Fraction(1, 10**4), cross_bandwidth=Fraction(2 * 10**6),
                  merge_overhead=Fraction(1, 1000)),
        CostModel(flops_per_device=Fraction(3 * 10**7), bandwidth=Fraction(7 * 10**6),
                  latency=Fraction(3, 10**5), cross_bandwidth=Fraction(10**5),
                  merge_overhead=Fraction(1, 10**5)),
    ]
    cases = mismatched = 0
    for blocks, n_exp, layers, n_dev, cost in itertools.product(
            (1, 2, 3), (0, 1), (1, 2), (1, 2, 3, 4), costs):
        m = ModeConfig(vocab_size=16, d_model=8, n_heads=4, n_backbone_layers=6, n_blocks=blocks,
                       n_experts=n_exp, expert_layers_per_block=layers, seq_len=4)
        c = replace(cost, n_devices=n_dev)
        for plan in small_plans(m, n_dev):
            got = simulate_step(plan, m, c, batch_size=2).latency_s
            spans = oracle_latencies(plan, m, c, 2)
            cases += 1
            mismatched += not (min(spans) == got == max(spans))
    elapsed = time.perf_counter() - t0
    ok = mismatched == 0 and cases > 0
    record_criterion(8, ok, f"{cases} plans, {mismatched} mismatches against exact oracle, "
                            f"{elapsed:.1f}s")
    assert ok


# -- 9 ------------------------------------------------------------------------------------------

def test_criterion_09_sharding_trends():
    cost = default_cost()
    m = reference_model()
    lat = {name: float(simulate_step(p, m, cost, batch_size=4).latency_s)
           for name, p in (("1", one_mesh(m)), ("3", three_mesh()), ("5", five_mesh()))}
    speed = lat["1"] / lat["3"]
    a = lat["3"] < lat["1"] and speed >= 1.2 and abs(lat["3"] - lat["5"]) / lat["5"] < 0.05
    rows = sweep_expert_size(two_expert_plan(), reference_model(2, 2, 2), range(1, 7), cost)
    idle = [float(r.mpmd.idle_s) for r in rows]
    k = min(range(len(rows)), key=idle.__getitem__)
    bal = rows[k]
    b = (rows[0].spmd_s < rows[0].mpmd_s and rows[-1].spmd_s < rows[-1].mpmd_s
         and bal.mpmd_s < bal.spmd_s)
    merges = [r.mpmd_s for r in sweep_merges(five_mesh(), m, [1, 2, 3, 6], cost)]
    c = all(x < y for x, y in zip(merges, merges[1:]))
    ok = a and b and c
    record_criterion(9, ok, f"(a) 1/3/5-mesh {lat['1'] * 1e3:.0f}/{lat['3'] * 1e3:.0f}/"
                            f"{lat['5'] * 1e3:.0f} ms, speedup {speed:.2f}; (b) balanced at size "
                            f"{bal.point}: {b}; (c) merges strictly increasing: {c}")
    assert ok


# -- 10 -----------------------------------------------------------------------------------------

TINY = [
    "--set", "model.d_model=16", "--set", "model.n_heads=2", "--set", "model.n_backbone_layers=2",
    "--set", "model.n_blocks=2", "--set", "model.expert_layers_per_block=1",
    "--set", "model.seq_len=16", "--set", "experiment.n_train=32", "--set", "experiment.n_test=8",
    "--set", "experiment.pretrain_steps=8", "--set", "experiment.steps=8",
    "--set", "experiment.batch_size=8", "--set", "lora.rank=2",
]


def _artifact_hashes(root: Path) -> dict:
    # run directory names carry a timestamp and a collision counter; key by command and arguments
    stamp = re.compile(r"\d{8}T\d{6}(-\d+)*")
    out: dict[str, list] = {}
    for man in sorted(root.rglob("manifest.json")):
        m = json.loads(man.read_text())
        args = json.dumps(m["args"], sort_keys=True).replace(str(root), "<root>")
        key = stamp.sub("T", f"{m['command']} {m['seed']} {args}")
        out.setdefault(key, []).append(sorted((n, a["sha256"]) for n, a in m["artifacts"].items()))
    return {k: sorted(v) for k, v in out.items()}


def _rerun(root: Path) -> dict:
    w = ["--workdir", str(root)]
    assert main(["pipeline", "--seeds", "3"] + TINY + w) == 0
    assert main(["sweep", "ablate", "--blocks", "2", "--layers", "1"] + TINY + w) == 0
    assert main(["simulate", "--sweep", "all"] + w) == 0
    assert main(["data", "--domain", "english", "--n", "5", "--show", "0"] + w) == 0
    pipe = next((root / "pipeline").iterdir())
    bb = str(next((pipe / "runs" / "pretrain-backbone").iterdir()) / "backbone.ckpt")
    assert main(["lora", "--backbone", bb, "--set", "lora.rank=4"] + TINY[:-2] + w) == 0
    return _artifact_hashes(root)


def test_criterion_10_determinism(tmp_path):
    first, second = _rerun(tmp_path / "a"), _rerun(tmp_path / "b")
    n = sum(len(arts) for runs in first.values() for arts in runs)
    ok = n > 0 and first == second
    digest = hashlib.sha256(json.dumps(sorted(first.items())).encode()).hexdigest()[:12]
    record_criterion(10, ok, f"{n} artifacts across {len(first)} run kinds reproduced "
                             f"(digest {digest})")
    assert ok
