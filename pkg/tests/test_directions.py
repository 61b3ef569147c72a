"""Adaptation directions at a small scale: experts and fine-tuning help their target domain,
and full fine-tuning forgets the held-out domain."""
from __future__ import annotations

import pytest

from modelab.model import ModeConfig
from modelab.training import evaluate, full_finetune
from modelab.training.experiments import (
    DeskProfile,
    build_backbone,
    build_corpora,
    train_domain_expert,
)

SMALL = DeskProfile(model=ModeConfig(d_model=32, n_heads=4, n_backbone_layers=4, n_blocks=2,
                                     expert_layers_per_block=1, seq_len=32),
                    n_train=512, n_test=32, pretrain_steps=300, steps=300)


@pytest.fixture(scope="module")
def setup():
    bb = build_backbone(SMALL)
    data = build_corpora(SMALL, 0)
    return bb, data, evaluate(bb, data.test).accuracy


def test_math_expert_beats_backbone_on_math(setup):
    bb, data, base = setup
    expert = train_domain_expert(SMALL, bb, data, 0, "math")
    assert evaluate(expert, data.test).accuracy["math"] > base["math"]


def test_full_finetune_adapts_and_forgets(setup):
    bb, data, base = setup
    ft = full_finetune(bb, data.mixture, SMALL.spec(SMALL.steps, 0)).model
    acc = evaluate(ft, data.test).accuracy
    assert acc["code"] > base["code"]
    assert acc["english"] < base["english"]
