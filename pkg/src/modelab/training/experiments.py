"""Experiment drivers: the multi-domain comparison table, scaling sweeps and ablations.

All drivers share a ``DeskProfile`` that fixes model size, corpus sizes and
step budgets, so every number in a report is reproducible from
``(profile, seed)``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

from ..data.corpora import DomainCorpus, MixtureSpec, make_corpus, mix
from ..model.config import LoraConfig, ModeConfig
from ..model.mode import ModeModel
from .train import (
    EvalReport,
    TrainSpec,
    compose,
    evaluate,
    full_finetune,
    lora_finetune,
    pretrain_backbone,
    train_expert,
)

log = logging.getLogger(__name__)

DOMAINS = ("math", "code", "english")
ADAPT_DOMAINS = ("math", "code")
TABLE1_METHODS = ("full-ft", "lora", "mode-1x-uninit", "mode-2x-uninit", "mode-2x-frozen",
                  "mode-2x-experts")


@dataclass(frozen=True)
class DeskProfile:
    model: ModeConfig = field(default_factory=lambda: ModeConfig(
        d_model=32, n_heads=4, n_backbone_layers=6, n_blocks=3, expert_layers_per_block=2,
        seq_len=32))
    n_train: int = 2048
    n_test: int = 128
    pretrain_steps: int = 1500
    steps: int = 1000
    stage1_frac: float = 0.8
    batch_size: int = 16
    lr: float = 1e-3
    lora_rank: int = 16
    backbone_seed: int = 0
    # initial backbone logit of every freshly composed gate
    compose_gate_bias: float = 2.0

    @property
    def stage1_steps(self) -> int:
        return int(round(self.steps * self.stage1_frac))

    @property
    def stage2_steps(self) -> int:
        return self.steps - self.stage1_steps

    def spec(self, steps: int, seed: int) -> TrainSpec:
        return TrainSpec(lr=self.lr, batch_size=self.batch_size, steps=steps, seed=seed)

    def with_(self, **kw) -> "DeskProfile":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


# smallest profile that still shows the trends; used by the test suite
QUICK = DeskProfile(n_train=1024, n_test=64, pretrain_steps=600, steps=500)


@dataclass
class Corpora:
    train: dict[str, DomainCorpus]
    test: dict[str, DomainCorpus]
    mixture: DomainCorpus


def build_corpora(profile: DeskProfile, seed: int) -> Corpora:
    """Per-domain train/test sets plus the equal math+code mixture for a seed."""
    T = profile.model.seq_len + 1
    train = {d: make_corpus(d, "train", seed, profile.n_train, T) for d in DOMAINS}
    test = {d: make_corpus(d, "test", seed, profile.n_test, T) for d in DOMAINS}
    mixture = mix(MixtureSpec([train[d] for d in ADAPT_DOMAINS], [0.5, 0.5], profile.n_train, seed))
    return Corpora(train, test, mixture)


def pretrain_corpus(profile: DeskProfile) -> DomainCorpus:
    """Equal mixture of all three domains, drawn from seeds no experiment uses."""
    T = profile.model.seq_len + 1
    seed = 1_000_000 + profile.backbone_seed
    parts = [make_corpus(d, "train", seed, profile.n_train, T) for d in DOMAINS]
    return mix(MixtureSpec(parts, [1 / 3, 1 / 3, 1 / 3], profile.n_train * 3 // 2, seed))


def build_backbone(profile: DeskProfile) -> ModeModel:
    cfg = profile.model.with_(seed=profile.backbone_seed, n_experts=0)
    spec = profile.spec(profile.pretrain_steps, profile.backbone_seed)
    return pretrain_backbone(cfg, pretrain_corpus(profile), spec).model


def _expert_cfg(profile: DeskProfile, seed: int, **kw) -> ModeConfig:
    return profile.model.with_(seed=profile.backbone_seed, n_experts=1, **kw)


def expert_seed(seed: int, domain: str) -> int:
    return seed * 100 + DOMAINS.index(domain)


def train_domain_expert(profile: DeskProfile, backbone: ModeModel, data: Corpora, seed: int,
                        domain: str, steps: int | None = None) -> ModeModel:
    steps = profile.stage1_steps if steps is None else steps
    spec = profile.spec(steps, expert_seed(seed, domain))
    return train_expert(backbone, data.train[domain], _expert_cfg(profile, seed), spec).model


def train_domain_experts(profile: DeskProfile, backbone: ModeModel, data: Corpora, seed: int,
                         domains=ADAPT_DOMAINS, steps: int | None = None) -> list[ModeModel]:
    return [train_domain_expert(profile, backbone, data, seed, d, steps) for d in domains]


def table1(profile: DeskProfile, seed: int, backbone: ModeModel | None = None,
           methods=TABLE1_METHODS) -> list[EvalReport]:
    """Rows of the multi-domain comparison: baselines and MoDE variants on math+code."""
    backbone = build_backbone(profile) if backbone is None else backbone
    data = build_corpora(profile, seed)
    S = profile.steps
    rows = [evaluate(backbone, data.test, "backbone", trainable=0, seed=seed)]
    needs_experts = {"mode-2x-frozen", "mode-2x-experts"} & set(methods)
    experts = train_domain_experts(profile, backbone, data, seed) if needs_experts else []
    for m in methods:
        log.info("table1 seed=%d method=%s", seed, m)
        if m == "full-ft":
            model = full_finetune(backbone, data.mixture, profile.spec(S, seed)).model
        elif m == "lora":
            lcfg = LoraConfig(rank=profile.lora_rank)
            model = lora_finetune(backbone, data.mixture, lcfg, profile.spec(S, seed)).model
        elif m in ("mode-1x-uninit", "mode-2x-uninit"):
            n = 1 if m == "mode-1x-uninit" else 2
            model = compose(backbone, [], data.mixture, profile.spec(S, seed), "uninitialized",
                            n_uninitialized=n, gate_backbone_bias=profile.compose_gate_bias).model
        elif m in ("mode-2x-frozen", "mode-2x-experts"):
            variant = "frozen" if m == "mode-2x-frozen" else "standard"
            model = compose(backbone, experts, data.mixture, profile.spec(profile.stage2_steps, seed),
                            variant, gate_backbone_bias=profile.compose_gate_bias).model
        else:
            raise ValueError(f"unknown method {m!r}")
        rows.append(evaluate(model, data.test, m, seed=seed))
    return rows


# -- sweeps ------------------------------------------------------------------------------

def ablate_mode_configs(profile: DeskProfile, seed: int, blocks=(2, 3), layers=(1, 2),
                        backbone: ModeModel | None = None) -> list[EvalReport]:
    """One code expert per (blocks, layers-per-block) grid point; evaluated on code and english."""
    backbone = build_backbone(profile) if backbone is None else backbone
    data = build_corpora(profile, seed)
    tests = {d: data.test[d] for d in ("code", "english")}
    rows = []
    for nb in blocks:
        for nl in layers:
            cfg = _expert_cfg(profile, seed, n_blocks=nb, expert_layers_per_block=nl)
            model = train_expert(backbone, data.train["code"], cfg,
                                 profile.spec(profile.steps, seed)).model
            rows.append(evaluate(model, tests, f"mode-{nb}b-{nl}l", seed=seed, blocks=nb,
                                 layers=nl))
    return rows


def lora_sweep(profile: DeskProfile, seed: int, ranks=(8, 16, 32), ffn=(False,), embeddings=(False,),
               backbone: ModeModel | None = None, allow_overcomplete: bool = False
               ) -> list[EvalReport]:
    """LoRA on the code task for each (rank, ffn, embeddings) point."""
    backbone = build_backbone(profile) if backbone is None else backbone
    data = build_corpora(profile, seed)
    tests = {d: data.test[d] for d in ("code", "english")}
    rows = []
    for r in ranks:
        for f in ffn:
            for e in embeddings:
                lcfg = LoraConfig(rank=r, apply_to_ffn=f, apply_to_embeddings=e,
                                  allow_overcomplete=allow_overcomplete)
                model = lora_finetune(backbone, data.train["code"], lcfg,
                                      profile.spec(profile.steps, seed)).model
                rows.append(evaluate(model, tests, f"lora-r{r}", seed=seed, rank=r, ffn=f,
                                     embeddings=e))
    return rows


def sweep_scaling(profile: DeskProfile, seed: int, axis: str, points,
                  backbone: ModeModel | None = None) -> list[EvalReport]:
    """Code-task scaling of MoDE against LoRA.

    ``axis="parameters"``: each point is ``(expert_layers_per_block, lora_rank)``
    or a bare int used for both. ``axis="examples"``: each point is a training
    corpus size; the step count stays fixed.
    """
    pts = list(points)
    keys = [p if isinstance(p, (int, float)) else p[0] for p in pts]
    if keys != sorted(keys):
        raise ValueError("sweep points must be sorted ascending")
    if axis not in ("parameters", "examples"):
        raise ValueError(f"unknown axis {axis!r}")
    backbone = build_backbone(profile) if backbone is None else backbone
    data = build_corpora(profile, seed)
    tests = {d: data.test[d] for d in ("code", "english")}
    rows = []
    for p in pts:
        if axis == "parameters":
            layers, rank = (p, p) if isinstance(p, int) else p
            train, cfg = data.train["code"], _expert_cfg(profile, seed, expert_layers_per_block=layers)
            lcfg = LoraConfig(rank=rank, allow_overcomplete=True)
            tag = {"point": str(p), "expert_layers": layers, "lora_rank": rank}
        else:
            train = data.train["code"].head(int(p))
            cfg, lcfg = _expert_cfg(profile, seed), LoraConfig(rank=profile.lora_rank)
            tag = {"point": str(p), "examples": int(p)}
        spec = profile.spec(profile.steps, seed)
        mode = train_expert(backbone, train, cfg, spec).model
        rows.append(evaluate(mode, tests, "mode", seed=seed, axis=axis, **tag))
        lora = lora_finetune(backbone, train, lcfg, spec).model
        rows.append(evaluate(lora, tests, "lora", seed=seed, axis=axis, **tag))
    return rows


def mixture_data_efficiency(profile: DeskProfile, seed: int, budgets=(0, 64, 256, 1024),
                            backbone: ModeModel | None = None,
                            variants=("standard", "frozen", "uninitialized")) -> list[EvalReport]:
    """Composition variants trained on growing prefixes of the math+code mixture.

    A budget of 0 evaluates the freshly composed model without any stage-2 step.
    """
    backbone = build_backbone(profile) if backbone is None else backbone
    data = build_corpora(profile, seed)
    experts = train_domain_experts(profile, backbone, data, seed)
    rows = []
    for b in budgets:
        mixture = data.mixture.head(b)
        for v in variants:
            steps = profile.stage2_steps if v != "uninitialized" else profile.steps
            spec = profile.spec(steps if b > 0 else 0, seed)
            n_new = 2 if v == "uninitialized" else None
            model = compose(backbone, experts, mixture, spec, v, n_uninitialized=n_new,
                            gate_backbone_bias=profile.compose_gate_bias).model
            rows.append(evaluate(model, data.test, f"mode-{v}", seed=seed, budget=b))
    return rows
