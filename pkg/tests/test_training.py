from __future__ import annotations

import numpy as np
import pytest

from conftest import randomize
from modelab.data import DomainCorpus, make_corpus
from modelab.model import (
    InputError,
    LoraConfig,
    ModeConfig,
    ModeModel,
    param_group,
    permute_experts,
)
from modelab.model.mode import init_expert
from modelab.tensor import Tensor
from modelab.tensor.checkpoint import params_hash
from modelab.training import (
    Adam,
    CompositionError,
    TrainingError,
    TrainSpec,
    compose,
    eval_next_token,
    evaluate,
    expert_params,
    fit,
    full_finetune,
    lora_finetune,
    pretrain_backbone,
    train_expert,
)
from modelab.training.experiments import (
    DeskProfile,
    ablate_mode_configs,
    build_backbone,
    build_corpora,
    mixture_data_efficiency,
    sweep_scaling,
    table1,
    train_domain_experts,
)

CFG = ModeConfig(vocab_size=256, d_model=16, n_heads=2, n_backbone_layers=2, n_blocks=2,
                 expert_layers_per_block=1, seq_len=16)
TINY = DeskProfile(model=CFG, n_train=32, n_test=8, pretrain_steps=5, steps=5, batch_size=8,
                   lora_rank=2)


def _corpus(domain="math", split="train", n=64, seed=0):
    return make_corpus(domain, split, seed, n, CFG.seq_len + 1)


@pytest.fixture(scope="module")
def backbone():
    return pretrain_backbone(CFG, _corpus("english"), TrainSpec(steps=20, batch_size=8)).model


def _group_bytes(model, group):
    return params_hash({n: t.data for n, t in model.named(group).items()})


def test_train_spec_validation():
    with pytest.raises(ValueError):
        TrainSpec(steps=-1)
    with pytest.raises(ValueError):
        TrainSpec(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainSpec(trainable=("heads",))
    assert TrainSpec().with_(steps=3, trainable=["gates"]).trainable == ("gates",)


def test_adam_zero_gradient_is_a_no_op():
    p = Tensor(np.arange(4.0), trainable=True)
    before = p.data.copy()
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(3):
        p.grad = np.zeros(4)
        opt.step()
    assert np.array_equal(p.data, before)
    p.grad = None
    opt.step()
    assert np.array_equal(p.data, before)


def test_zero_steps_keeps_expert_init(backbone):
    cfg = CFG.with_(n_experts=1)
    res = train_expert(backbone, _corpus(), cfg, TrainSpec(steps=0, seed=5))
    init = init_expert(cfg, 0, seed=5)
    got = expert_params(res.model)
    assert all(np.array_equal(got[k[len("experts.0."):]], v) for k, v in init.items())


def test_expert_training_leaves_backbone_bytes(backbone):
    before = _group_bytes(backbone, "backbone")
    res = train_expert(backbone, _corpus(), CFG.with_(n_experts=1), TrainSpec(steps=10, batch_size=8))
    assert _group_bytes(res.model, "backbone") == before
    assert _group_bytes(backbone, "backbone") == before
    with pytest.raises(CompositionError):
        train_expert(backbone, _corpus(), CFG.with_(n_experts=2), TrainSpec(steps=1))


@pytest.mark.parametrize("groups", [("experts",), ("gates",), ("experts", "gates"), ("backbone",)])
def test_freeze_soundness_for_each_policy(groups):
    m = randomize(ModeModel.init(CFG.with_(n_experts=2)), std=0.02)
    before = {g: _group_bytes(m, g) for g in ("backbone", "experts", "gates")}
    fit(m, _corpus(), TrainSpec(steps=3, batch_size=4, trainable=groups))
    for g, h in before.items():
        assert (_group_bytes(m, g) == h) == (g not in groups), g


def test_training_is_deterministic(backbone):
    runs = [train_expert(backbone, _corpus(), CFG.with_(n_experts=1),
                         TrainSpec(steps=8, batch_size=8, seed=3)) for _ in range(2)]
    assert params_hash(runs[0].model.state_dict()) == params_hash(runs[1].model.state_dict())
    assert runs[0].losses == runs[1].losses


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_step(backbone):
    with pytest.raises(TrainingError) as exc:
        full_finetune(backbone, _corpus(), TrainSpec(steps=60, lr=1e12, batch_size=8, clip_norm=0))
    assert exc.value.step >= 0


def test_empty_corpus_rejected(backbone):
    empty = DomainCorpus("math", np.zeros((0, 17), np.int32), "test")
    with pytest.raises(InputError):
        eval_next_token(backbone, empty)
    with pytest.raises(InputError):
        fit(ModeModel.init(CFG), DomainCorpus("math", np.zeros((0, 17), np.int32)), TrainSpec(steps=1))
    with pytest.raises(InputError):
        eval_next_token(backbone, _corpus(split="train"))


def test_eval_hand_count():
    m = randomize(ModeModel.init(CFG.with_(vocab_size=256)), seed=2, std=0.5)
    rows = _corpus(split="test", n=2).tokens
    logits = m.logits(rows[:, :-1])
    hits = 0
    for r in range(2):
        for t in range(CFG.seq_len):
            best = 0
            for v in range(256):
                if logits[r, t, v] > logits[r, t, best]:
                    best = v
            hits += int(best == rows[r, t + 1])
    corpus = DomainCorpus("math", rows, "test")
    assert eval_next_token(m, corpus) == hits / (2 * CFG.seq_len)
    assert eval_next_token(m, corpus) == eval_next_token(m, corpus)


def test_eval_zero_head_picks_lowest_id():
    m = ModeModel.init(CFG)
    m.params["head.out"].data[:] = 0
    rows = np.array([[1, 0, 5, 0, 0] + [0] * 12, [3] * 17], dtype=np.int32)
    acc = eval_next_token(m, DomainCorpus("math", rows, "test"))
    assert acc == np.mean(rows[:, 1:] == 0)
    assert 0 <= acc <= 1


def test_compose_frozen_keeps_expert_bytes(backbone):
    experts = [train_expert(backbone, _corpus(d), CFG.with_(n_experts=1),
                            TrainSpec(steps=4, batch_size=8, seed=k)).model
               for k, d in enumerate(("math", "code"))]
    before = [params_hash(expert_params(e)) for e in experts]
    mix = _corpus("code")
    res = compose(backbone, experts, mix, TrainSpec(steps=5, batch_size=8), "frozen")
    m = res.model
    assert m.cfg.n_experts == 2
    assert [params_hash(expert_params(m, j)) for j in range(2)] == before
    assert m.n_params(trainable_only=True) == sum(t.data.size for t in m.named("gates").values())
    std = compose(backbone, experts, mix, TrainSpec(steps=5, batch_size=8), "standard").model
    assert params_hash(expert_params(std, 0)) != before[0]


def test_compose_rejects_bad_inputs(backbone):
    e = train_expert(backbone, _corpus(), CFG.with_(n_experts=1), TrainSpec(steps=0)).model
    other = train_expert(backbone, _corpus(), CFG.with_(n_experts=1, n_blocks=1,
                                                         expert_layers_per_block=2),
                         TrainSpec(steps=0)).model
    with pytest.raises(CompositionError):
        compose(backbone, [e, other], _corpus(), TrainSpec(steps=0))
    with pytest.raises(CompositionError):
        compose(backbone, [], _corpus(), TrainSpec(steps=0))
    with pytest.raises(CompositionError):
        compose(backbone, [e], _corpus(), TrainSpec(steps=0), "sideways")
    wide = pretrain_backbone(CFG.with_(d_model=8), _corpus(), TrainSpec(steps=0)).model
    with pytest.raises(CompositionError):
        compose(wide, [e], _corpus(), TrainSpec(steps=0))


def test_self_composition_is_swap_symmetric(backbone):
    e = train_expert(backbone, _corpus(), CFG.with_(n_experts=1),
                     TrainSpec(steps=4, batch_size=8)).model
    m = compose(backbone, [e, e], _corpus(), TrainSpec(steps=3, batch_size=8)).model
    test = _corpus(split="test", n=8)
    assert eval_next_token(m, test) == eval_next_token(permute_experts(m, [1, 0]), test)


def test_uninitialized_composition_and_baselines(backbone):
    m = compose(backbone, [], _corpus(), TrainSpec(steps=2, batch_size=8), "uninitialized",
                n_uninitialized=2, gate_backbone_bias=2.0).model
    assert m.cfg.n_experts == 2
    ft = full_finetune(backbone, _corpus(), TrainSpec(steps=2, batch_size=8)).model
    assert ft.n_params(trainable_only=True) == ft.n_params()
    lo = lora_finetune(backbone, _corpus(), LoraConfig(rank=2), TrainSpec(steps=2, batch_size=8)).model
    assert all(param_group(n) == "adapters" for n, t in lo.params.items() if t.trainable)
    assert _group_bytes(lo, "backbone") == _group_bytes(backbone, "backbone")


def test_gate_backbone_bias_sets_initial_logit(backbone):
    m = compose(backbone, [], _corpus(), TrainSpec(steps=0), "uninitialized",
                n_uninitialized=1, gate_backbone_bias=2.0).model
    assert m.params["gates.1.b"].data.tolist() == [2.0, 0.0]


def test_eval_report_average(backbone):
    tests = {d: _corpus(d, "test", n=4) for d in ("math", "code", "english")}
    rep = evaluate(backbone, tests, "bb")
    assert rep.average == pytest.approx(np.mean(list(rep.accuracy.values())))
    row = rep.row()
    assert row["params_total"] == backbone.n_params() and row["method"] == "bb"


@pytest.fixture(scope="module")
def tiny_backbone():
    return build_backbone(TINY)


def test_table1_rows(tiny_backbone):
    rows = table1(TINY, 0, backbone=tiny_backbone)
    assert [r.label for r in rows] == ["backbone", "full-ft", "lora", "mode-1x-uninit",
                                       "mode-2x-uninit", "mode-2x-frozen", "mode-2x-experts"]
    assert all(set(r.accuracy) == {"math", "code", "english"} for r in rows)


def test_ablation_grid_shape(tiny_backbone):
    rows = ablate_mode_configs(TINY, 0, blocks=(1, 2), layers=(1, 2), backbone=tiny_backbone)
    assert len(rows) == 4
    for r in rows:
        assert r.average == pytest.approx((r.accuracy["code"] + r.accuracy["english"]) / 2)
    assert {(r.extra["blocks"], r.extra["layers"]) for r in rows} == {(1, 1), (1, 2), (2, 1), (2, 2)}


def test_scaling_sweep(tiny_backbone):
    with pytest.raises(ValueError):
        sweep_scaling(TINY, 0, "examples", [16, 8], backbone=tiny_backbone)
    with pytest.raises(ValueError):
        sweep_scaling(TINY, 0, "depth", [1], backbone=tiny_backbone)
    rows = sweep_scaling(TINY, 0, "examples", [16], backbone=tiny_backbone)
    assert [r.label for r in rows] == ["mode", "lora"]
    again = sweep_scaling(TINY, 0, "examples", [8, 16], backbone=tiny_backbone)
    assert again[2].accuracy == rows[0].accuracy and again[3].accuracy == rows[1].accuracy


def test_mixture_zero_budget_is_untrained(tiny_backbone):
    rows = mixture_data_efficiency(TINY, 0, budgets=(0, 8), backbone=tiny_backbone,
                                   variants=("frozen",))
    assert [r.extra["budget"] for r in rows] == [0, 8]
    data = build_corpora(TINY, 0)
    experts = train_domain_experts(TINY, tiny_backbone, data, 0)
    raw = compose(tiny_backbone, experts, data.mixture.head(0), TrainSpec(steps=0), "frozen",
                  gate_backbone_bias=TINY.compose_gate_bias).model
    assert evaluate(raw, data.test).accuracy == rows[0].accuracy
