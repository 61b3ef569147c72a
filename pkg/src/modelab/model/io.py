"""Model <-> checkpoint conversion."""
from __future__ import annotations

from pathlib import Path

from ..tensor import checkpoint as ck
from .config import LoraConfig, ModeConfig
from .lora import LoraState
from .mode import ModeModel


def to_checkpoint(model: ModeModel, names=None, rng_state=None, meta=None) -> ck.Checkpoint:
    params = {n: t.data for n, t in model.params.items() if names is None or n in names}
    config = {"model": model.cfg.to_dict()}
    if model.lora is not None:
        config["lora"] = model.lora.cfg.to_dict()
    return ck.Checkpoint(params, config, model.cfg.config_hash(), rng_state, dict(meta or {}))


def from_checkpoint(c: ck.Checkpoint) -> ModeModel:
    cfg = ModeConfig(**c.config["model"])
    model = ModeModel(cfg, c.params)
    if "lora" in c.config:
        lcfg = LoraConfig(**c.config["lora"])
        from .lora import lora_targets
        model.lora = LoraState(lcfg, lora_targets(model, lcfg))
    return model


def save_model(path: str | Path, model: ModeModel, **kw) -> str:
    return ck.save(path, to_checkpoint(model, **kw))


def load_model(path: str | Path) -> ModeModel:
    return from_checkpoint(ck.load(path))
