"""MoDE architecture: blocks of frozen backbone layers, parallel experts and token-level gates."""
from .config import LoraConfig, ModeConfig, load_ini
from .io import from_checkpoint, load_model, save_model, to_checkpoint
from .lora import attach_lora
from .mode import (
    GROUPS,
    GateOutput,
    InputError,
    ModeModel,
    backbone_logits,
    param_group,
    permute_experts,
)

__all__ = [
    "GROUPS", "GateOutput", "InputError", "LoraConfig", "ModeConfig", "ModeModel",
    "attach_lora", "backbone_logits", "from_checkpoint", "load_ini", "load_model",
    "param_group", "permute_experts", "save_model", "to_checkpoint",
]
