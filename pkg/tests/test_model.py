from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import randomize, tiny_cfg
from modelab.model import (
    InputError,
    LoraConfig,
    ModeConfig,
    ModeModel,
    attach_lora,
    backbone_logits,
    load_ini,
    load_model,
    param_group,
    permute_experts,
    save_model,
)
from modelab.model.config import from_mapping
from modelab.model.lora import lora_param_count
from modelab.tensor import ConfigError, DimensionError, Tensor, backward, cross_entropy, no_grad


def _tokens(cfg, seed=0, batch=2, t=None):
    rng = np.random.default_rng(seed)
    return rng.integers(0, cfg.vocab_size, size=(batch, t or cfg.seq_len))


def _softmax_oracle(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModeConfig(n_backbone_layers=5, n_blocks=2)
    with pytest.raises(ConfigError):
        ModeConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModeConfig(n_experts=-1)
    with pytest.raises(ConfigError):
        ModeConfig(n_experts=2, expert_layers_per_block=0)
    with pytest.raises(ConfigError):
        LoraConfig(rank=0)
    assert ModeConfig(n_experts=0, expert_layers_per_block=0).n_experts == 0


def test_ini_round_trip(tmp_path):
    p = tmp_path / "m.ini"
    p.write_text("[model]\nd_model = 16\nn_heads = 2\n\n[lora]\nrank = 4\napply_to_ffn = yes\n")
    raw = load_ini(p)
    cfg = from_mapping(ModeConfig, raw["model"])
    lcfg = from_mapping(LoraConfig, raw["lora"])
    assert cfg.d_model == 16 and cfg.n_heads == 2
    assert lcfg.rank == 4 and lcfg.apply_to_ffn is True
    with pytest.raises(ConfigError):
        from_mapping(ModeConfig, {"d_modle": "3"})
    with pytest.raises(ConfigError):
        load_ini(tmp_path / "missing.ini")


def test_gate_zero_init_is_uniform():
    m = ModeModel.init(tiny_cfg(n_experts=1))
    x = Tensor(np.random.default_rng(0).standard_normal((4, 8)))
    assert np.array_equal(m.gate_forward(0, x).alphas.data, np.full((4, 2), 0.5))
    m0 = ModeModel.init(tiny_cfg(n_experts=0))
    assert np.array_equal(m0.gate_forward(0, x).alphas.data, np.ones((4, 1)))


def test_gate_matches_direct_softmax_and_checks_width():
    m = randomize(ModeModel.init(tiny_cfg(n_experts=3)), seed=1, std=1.0)
    x = np.random.default_rng(2).standard_normal((2, 4, 8))
    got = m.gate_forward(1, Tensor(x)).alphas.data
    z = x @ m.params["gates.1.w"].data + m.params["gates.1.b"].data
    np.testing.assert_allclose(got, _softmax_oracle(z), atol=1e-9)
    np.testing.assert_allclose(got.sum(axis=-1), 1.0, atol=1e-6)
    with pytest.raises(DimensionError):
        m.gate_forward(0, Tensor(np.zeros((4, 6))))


def test_block_forward_matches_weighted_sum_oracle():
    m = randomize(ModeModel.init(tiny_cfg(n_experts=2, seq_len=3)), seed=3)
    x = Tensor(np.random.default_rng(4).standard_normal((3, 8)))
    with no_grad():
        y = m.block_forward(0, x).data
        outs = [m.backbone_branch(0, x).data] + [m.expert_branch(0, j, x).data for j in range(2)]
    z = x.data @ m.params["gates.0.w"].data + m.params["gates.0.b"].data
    a = _softmax_oracle(z)
    want = sum(a[:, j:j + 1] * outs[j] for j in range(3))
    np.testing.assert_allclose(y, want, atol=1e-10)


@pytest.mark.parametrize("j", [0, 1, 2])
def test_forced_gate_selects_one_branch(j):
    m = randomize(ModeModel.init(tiny_cfg(n_experts=2)), seed=5)
    m.params["gates.0.w"].data[:] = 0
    b = np.zeros(3)
    b[j] = 40.0
    m.params["gates.0.b"].data = b
    x = Tensor(np.random.default_rng(6).standard_normal((4, 8)))
    with no_grad():
        y = m.block_forward(0, x).data
        want = m.backbone_branch(0, x).data if j == 0 else m.expert_branch(0, j - 1, x).data
        a = m.gate_forward(0, x).alphas.data
    assert np.all(np.abs(a[:, j] - 1) < 1e-6)
    np.testing.assert_allclose(y, want, atol=1e-4)


def test_no_expert_model_equals_backbone():
    cfg = tiny_cfg(n_experts=0, n_backbone_layers=4, n_blocks=2)
    m = randomize(ModeModel.init(cfg), seed=7)
    toks = _tokens(cfg)
    assert np.array_equal(m.logits(toks), backbone_logits(m, toks))
    bare = ModeModel.init(cfg.with_(n_blocks=1))
    same = ModeModel.init(cfg)
    assert np.array_equal(bare.logits(toks), same.logits(toks))


@settings(max_examples=15, deadline=None)
@given(st.permutations([0, 1, 2]), st.integers(0, 2**16))
def test_expert_permutation_invariance_is_exact(perm, seed):
    m = randomize(ModeModel.init(tiny_cfg(n_experts=3, precision="float32")), seed=seed)
    toks = _tokens(m.cfg, seed)
    assert np.array_equal(m.logits(toks), permute_experts(m, list(perm)).logits(toks))


def test_doubling_one_gate_column_keeps_other_ratios():
    m = randomize(ModeModel.init(tiny_cfg(n_experts=3)), seed=8)
    x = Tensor(np.random.default_rng(9).standard_normal((4, 8)))
    a1 = m.gate_forward(0, x).alphas.data
    m.params["gates.0.w"].data[:, 2] *= 2
    m.params["gates.0.b"].data[2] *= 2
    a2 = m.gate_forward(0, x).alphas.data
    keep = [0, 1, 3]
    np.testing.assert_allclose(a1[:, keep] / a1[:, [0]], a2[:, keep] / a2[:, [0]], rtol=1e-12)
    assert not np.allclose(a1[:, 2], a2[:, 2])


def test_logits_shape_and_input_errors():
    m = ModeModel.init(tiny_cfg(n_experts=1))
    for t in (1, 2, 4):
        assert m.logits(_tokens(m.cfg, t=t)).shape == (2, t, 32)
    with pytest.raises(InputError):
        m.logits(np.array([[0, 32]]))
    with pytest.raises(InputError):
        m.logits(np.zeros((1, 5), dtype=int))


def test_frozen_backbone_gets_no_grad():
    m = randomize(ModeModel.init(tiny_cfg(n_experts=2)), seed=10)
    m.set_trainable({"experts", "gates"})
    toks = _tokens(m.cfg, t=4)
    backward(cross_entropy(m.forward(toks[:, :-1]), toks[:, 1:]))
    for name, t in m.params.items():
        if param_group(name) == "backbone":
            assert t.grad is None, name
        else:
            assert t.grad is not None, name


def test_lora_fresh_adapters_are_a_no_op():
    for lcfg in (LoraConfig(rank=4), LoraConfig(rank=2, apply_to_ffn=True, apply_to_embeddings=True)):
        m = randomize(ModeModel.init(tiny_cfg(n_experts=0)), seed=11)
        toks = _tokens(m.cfg)
        before = m.logits(toks)
        attach_lora(m, lcfg, seed=3)
        assert np.array_equal(before, m.logits(toks))


def test_lora_trainable_count_and_rank_check():
    cfg = tiny_cfg(n_experts=0)
    m = attach_lora(ModeModel.init(cfg), LoraConfig(rank=4))
    per_layer = lora_param_count(8, 24, 4) + lora_param_count(8, 8, 4)
    assert m.n_params(trainable_only=True) == cfg.n_backbone_layers * per_layer
    assert lora_param_count(8, 8, 3) == 3 * 16
    with pytest.raises(ConfigError):
        attach_lora(ModeModel.init(cfg), LoraConfig(rank=9))
    big = attach_lora(ModeModel.init(cfg), LoraConfig(rank=9, allow_overcomplete=True))
    assert big.n_params(trainable_only=True) == cfg.n_backbone_layers * (9 * 32 + 9 * 16)


def test_model_checkpoint_round_trip(tmp_path):
    m = randomize(ModeModel.init(tiny_cfg(n_experts=2)), seed=12)
    attach_lora(m, LoraConfig(rank=2))
    m.params["lora.backbone.0.attn.wo.A"].data[:] = 0.5
    save_model(tmp_path / "m.ckpt", m)
    back = load_model(tmp_path / "m.ckpt")
    toks = _tokens(m.cfg)
    assert np.array_equal(m.logits(toks), back.logits(toks))
    assert back.cfg == m.cfg
