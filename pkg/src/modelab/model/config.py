"""Architecture and adapter configuration plus their config-file form."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..tensor.nn import ConfigError

# fields that decide parameter shapes; checkpoints are compatible iff these agree
SHAPE_FIELDS = ("vocab_size", "d_model", "n_heads", "n_backbone_layers", "seq_len", "precision")


@dataclass(frozen=True)
class ModeConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_heads: int = 4
    n_backbone_layers: int = 6
    n_blocks: int = 3
    expert_layers_per_block: int = 2
    n_experts: int = 0
    seq_len: int = 64
    seed: int = 0
    precision: str = "float32"
    gate_backbone_bias: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 1 or self.d_model < 1 or self.seq_len < 1:
            raise ConfigError("vocab_size, d_model and seq_len must be positive")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_blocks < 1 or self.n_backbone_layers % self.n_blocks:
            raise ConfigError(
                f"n_backbone_layers={self.n_backbone_layers} is not divisible by n_blocks={self.n_blocks}")
        if self.n_experts < 0:
            raise ConfigError("n_experts must be >= 0")
        if self.n_experts > 0 and self.expert_layers_per_block < 1:
            raise ConfigError("expert_layers_per_block must be >= 1 when n_experts > 0")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def backbone_layers_per_block(self) -> int:
        return self.n_backbone_layers // self.n_blocks

    def with_(self, **kw) -> "ModeConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return _hash(self.to_dict())

    def shape_hash(self) -> str:
        d = self.to_dict()
        return _hash({k: d[k] for k in SHAPE_FIELDS})


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    apply_to_ffn: bool = False
    apply_to_embeddings: bool = False
    alpha: float = 16.0
    # ranks above a matrix's smaller side are rejected unless this is set
    allow_overcomplete: bool = False

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")

    def to_dict(self) -> dict:
        return asdict(self)


def _hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _coerce(kind, raw: str):
    if kind is bool or kind == "bool":
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return str(raw).strip()


def from_mapping(cls, values: dict):
    """Build ``cls`` from string-valued key/value pairs, rejecting unknown keys."""
    known = {f.name: f.type for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**{k: _coerce(known[k], v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_ini(path: str | Path) -> dict[str, dict[str, str]]:
    """Read an INI-style config file into ``{section: {key: value}}``."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    parser = configparser.ConfigParser()
    try:
        parser.read(p)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config {p}: {exc}") from exc
    return {s: dict(parser[s]) for s in parser.sections()}
