"""Layered run configuration: defaults < INI file < MODELAB_* environment < --set flags."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields

from ..model.config import LoraConfig, ModeConfig, from_mapping, load_ini
from ..tensor.nn import ConfigError
from ..training.experiments import DeskProfile

ENV_PREFIX = "MODELAB_"
RESERVED_ENV = {"MODELAB_WORKDIR"}


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0


@dataclass(frozen=True)
class ExperimentSettings:
    n_train: int = DeskProfile.n_train
    n_test: int = DeskProfile.n_test
    pretrain_steps: int = DeskProfile.pretrain_steps
    steps: int = DeskProfile.steps
    stage1_frac: float = DeskProfile.stage1_frac
    batch_size: int = DeskProfile.batch_size
    lr: float = DeskProfile.lr
    backbone_seed: int = DeskProfile.backbone_seed
    compose_gate_bias: float = DeskProfile.compose_gate_bias


SECTIONS = {
    "model": ModeConfig,
    "lora": LoraConfig,
    "experiment": ExperimentSettings,
    "run": RunSettings,
}

# shipped defaults differ from the bare dataclass defaults only in model size
DEFAULTS = {"model": {k: str(v) for k, v in DeskProfile().model.to_dict().items()}}


@dataclass(frozen=True)
class ResolvedConfig:
    model: ModeConfig
    lora: LoraConfig
    experiment: ExperimentSettings
    run: RunSettings

    @property
    def seed(self) -> int:
        return self.run.seed

    def profile(self) -> DeskProfile:
        e = asdict(self.experiment)
        return DeskProfile(model=self.model, lora_rank=self.lora.rank, **e)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "lora": self.lora.to_dict(),
                "experiment": asdict(self.experiment), "run": asdict(self.run)}


def _split_key(key: str) -> tuple[str, str]:
    for sec in SECTIONS:
        if key.startswith(sec + "."):
            return sec, key[len(sec) + 1:]
    raise ConfigError(f"setting {key!r} must look like <section>.<key> with section in {list(SECTIONS)}")


def env_layer(environ=None) -> dict[str, dict[str, str]]:
    """``MODELAB_<SECTION>_<KEY>=value`` entries, e.g. ``MODELAB_MODEL_D_MODEL=48``."""
    environ = os.environ if environ is None else environ
    out: dict[str, dict[str, str]] = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or name in RESERVED_ENV:
            continue
        rest = name[len(ENV_PREFIX):].lower()
        for sec in SECTIONS:
            if rest.startswith(sec + "_"):
                out.setdefault(sec, {})[rest[len(sec) + 1:]] = value
                break
        else:
            raise ConfigError(f"environment variable {name} names no config section")
    return out


def flag_layer(settings) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in settings or ():
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        sec, k = _split_key(key.strip())
        out.setdefault(sec, {})[k] = value.strip()
    return out


def resolve(path=None, settings=None, environ=None) -> ResolvedConfig:
    layers = [DEFAULTS]
    if path is not None:
        file_layer = load_ini(path)
        unknown = set(file_layer) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)} in {path}")
        layers.append(file_layer)
    layers += [env_layer(environ), flag_layer(settings)]
    merged: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    for layer in layers:
        for sec, kv in layer.items():
            merged[sec].update(kv)
    built = {sec: from_mapping(cls, merged[sec]) for sec, cls in SECTIONS.items()}
    return ResolvedConfig(**built)


def documented_keys() -> str:
    lines = []
    for sec, cls in SECTIONS.items():
        names = ", ".join(f.name for f in fields(cls))
        lines.append(f"  [{sec}] {names}")
    return "\n".join(lines)
