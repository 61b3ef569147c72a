"""LoRA adapters: W x  ->  W x + (alpha / rank) * (x A) B with W frozen.

A (input side, ``[in, rank]``) starts at zero and B (``[rank, out]``) is
normal with std 1/sqrt(rank), so a freshly attached adapter is an exact
no-op. The fused query/key/value projection carries a single adapter.
"""
from __future__ import annotations

import numpy as np

from ..tensor.core import Tensor, add, matmul, scale
from ..tensor.nn import ConfigError, embedding
from .config import LoraConfig
from .mode import ModeModel

ATTN_TARGETS = ("attn.wqkv", "attn.wo")
FFN_TARGETS = ("ffn.w1", "ffn.w2")


class LoraState:
    def __init__(self, cfg: LoraConfig, targets: list[str]):
        self.cfg = cfg
        self.targets = targets
        self.scale = cfg.alpha / cfg.rank

    def _apply(self, model: ModeModel, target: str, inp: Tensor, base: Tensor) -> Tensor:
        a = model.params[f"lora.{target}.A"]
        b = model.params[f"lora.{target}.B"]
        return add(base, scale(matmul(matmul(inp, a), b), self.scale))

    def layer_adapters(self, model: ModeModel, prefix: str):
        out = {}
        for t in self.targets:
            if t.startswith(prefix + "."):
                wname = t[len(prefix) + 1:]
                out[wname] = (lambda inp, base, _t=t: self._apply(model, _t, inp, base))
        return out or None

    def embed_adapter(self, model: ModeModel, ids: np.ndarray, tok: Tensor) -> Tensor:
        if "embed.tok" not in self.targets:
            return tok
        a = embedding(model.params["lora.embed.tok.A"], ids)
        return add(tok, scale(matmul(a, model.params["lora.embed.tok.B"]), self.scale))


def lora_targets(model: ModeModel, cfg: LoraConfig) -> list[str]:
    names = list(ATTN_TARGETS) + (list(FFN_TARGETS) if cfg.apply_to_ffn else [])
    targets = [f"backbone.{k}.{n}" for k in range(model.cfg.n_backbone_layers) for n in names]
    if cfg.apply_to_embeddings:
        targets.append("embed.tok")
    return targets


def attach_lora(model: ModeModel, cfg: LoraConfig, seed: int | None = None) -> ModeModel:
    """Freeze every existing parameter and add trainable low-rank adapters in place."""
    if model.lora is not None:
        raise ConfigError("model already carries LoRA adapters")
    dt = np.dtype(model.cfg.precision)
    rng = np.random.default_rng([model.cfg.seed if seed is None else seed, 3, cfg.rank])
    targets = lora_targets(model, cfg)
    new = {}
    for t in targets:
        m, n = model.params[t].shape
        if cfg.rank > min(m, n) and not cfg.allow_overcomplete:
            raise ConfigError(f"LoRA rank {cfg.rank} exceeds dimension of {t} {m}x{n}")
        new[f"lora.{t}.A"] = np.zeros((m, cfg.rank), dt)
        new[f"lora.{t}.B"] = (rng.standard_normal((cfg.rank, n)) / np.sqrt(cfg.rank)).astype(dt)
    for name, arr in new.items():
        model.params[name] = Tensor(arr, name=name)
    model.lora = LoraState(cfg, targets)
    model.set_trainable({"adapters"})
    return model


def lora_param_count(m: int, n: int, rank: int) -> int:
    return rank * (m + n)
