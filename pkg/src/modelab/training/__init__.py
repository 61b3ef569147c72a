"""Optimizer, two-stage training, composition and evaluation."""
from .optim import Adam
from .train import (
    VARIANTS,
    CompositionError,
    EvalReport,
    TrainingError,
    TrainResult,
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

__all__ = [
    "Adam", "CompositionError", "EvalReport", "TrainResult", "TrainSpec", "TrainingError",
    "VARIANTS", "compose", "eval_next_token", "evaluate", "expert_params", "fit", "full_finetune",
    "lora_finetune", "pretrain_backbone", "train_expert",
]
