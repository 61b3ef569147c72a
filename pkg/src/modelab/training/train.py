"""Training loop, evaluation, and the two-stage MoDE procedure with its baselines."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..data.corpora import DomainCorpus
from ..model.config import LoraConfig, ModeConfig
from ..model.lora import attach_lora
from ..model.mode import GROUPS, InputError, ModeModel, init_expert, init_gates
from ..tensor.checkpoint import params_hash
from ..tensor.core import TAPE, backward, no_grad
from ..tensor.nn import cross_entropy
from .optim import Adam

log = logging.getLogger(__name__)

VARIANTS = ("standard", "frozen", "uninitialized")


class TrainingError(RuntimeError):
    """Loss became non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


class CompositionError(ValueError):
    """Experts that cannot be combined into one model."""


@dataclass(frozen=True)
class TrainSpec:
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 2000
    optimizer: str = "adam"
    seed: int = 0
    # groups updated during training; all others stay frozen
    trainable: tuple[str, ...] = ("experts", "gates")
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        bad = set(self.trainable) - set(GROUPS) - {"all"}
        if bad:
            raise ValueError(f"unknown parameter groups {sorted(bad)}")

    def with_(self, **kw) -> "TrainSpec":
        d = asdict(self)
        d.update(kw)
        d["trainable"] = tuple(d["trainable"])
        return TrainSpec(**d)


@dataclass
class TrainResult:
    model: ModeModel
    losses: list[float] = field(default_factory=list)

    def loss_decreased(self, window: int = 50) -> bool:
        """Mean loss over the last window is below the mean over the first."""
        if len(self.losses) < 2:
            return False
        w = max(1, min(window, len(self.losses) // 2))
        return float(np.mean(self.losses[-w:])) < float(np.mean(self.losses[:w]))


def _batches(n: int, batch: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        if n < batch:
            perm = np.resize(perm, batch)
        for lo in range(0, len(perm) - batch + 1, batch):
            yield perm[lo:lo + batch]


def fit(model: ModeModel, corpus: DomainCorpus, spec: TrainSpec) -> TrainResult:
    """Minimise next-token cross-entropy on ``corpus`` over the groups in ``spec.trainable``."""
    model.set_trainable(spec.trainable)
    res = TrainResult(model)
    if spec.steps == 0:
        return res
    if corpus.n == 0:
        raise InputError("cannot train on an empty corpus")
    params = {n: t for n, t in model.params.items() if t.trainable}
    opt = Adam(params, lr=spec.lr, clip_norm=spec.clip_norm)
    batches = _batches(corpus.n, spec.batch_size, np.random.default_rng([spec.seed, 7]))
    for step in range(spec.steps):
        rows = corpus.tokens[next(batches)]
        TAPE.clear()
        loss = cross_entropy(model.forward(rows[:, :-1]), rows[:, 1:])
        val = loss.item()
        if not math.isfinite(val):
            TAPE.clear()
            raise TrainingError(step, val)
        backward(loss)
        opt.step()
        model.zero_grad()
        res.losses.append(val)
    return res


def eval_next_token(model: ModeModel, corpus: DomainCorpus, batch: int = 64,
                    require_test: bool = True) -> float:
    """Fraction of positions whose argmax logit (ties -> lowest id) is the true next token."""
    if corpus.n == 0 or corpus.seq_len < 2:
        raise InputError("evaluation corpus is empty")
    if require_test and corpus.split != "test":
        raise InputError(f"evaluation expects a test split, got {corpus.split!r}")
    correct = 0
    with no_grad():
        for lo in range(0, corpus.n, batch):
            rows = corpus.tokens[lo:lo + batch]
            pred = model.forward(rows[:, :-1]).data.argmax(axis=-1)
            correct += int((pred == rows[:, 1:]).sum())
    return correct / (corpus.n * (corpus.seq_len - 1))


@dataclass
class EvalReport:
    label: str
    accuracy: dict[str, float]
    params_total: int
    params_trainable: int
    extra: dict = field(default_factory=dict)

    @property
    def average(self) -> float:
        return float(np.mean(list(self.accuracy.values())))

    def row(self) -> dict:
        out = {"method": self.label}
        out.update({k: v for k, v in self.accuracy.items()})
        out["average"] = self.average
        out["params_total"] = self.params_total
        out["params_trainable"] = self.params_trainable
        out.update(self.extra)
        return out


def evaluate(model: ModeModel, tests: dict[str, DomainCorpus], label: str = "",
             trainable: int | None = None, **extra) -> EvalReport:
    acc = {dom: eval_next_token(model, c) for dom, c in tests.items()}
    n_tr = model.n_params(trainable_only=True) if trainable is None else trainable
    return EvalReport(label, acc, model.n_params(), n_tr, dict(extra))


# -- stage 0: backbone ----------------------------------------------------------------

def pretrain_backbone(cfg: ModeConfig, corpus: DomainCorpus, spec: TrainSpec) -> TrainResult:
    """Train every parameter of an expert-free model; the result is frozen afterwards."""
    model = ModeModel.init(cfg.with_(n_experts=0))
    res = fit(model, corpus, spec.with_(trainable=("all",)))
    model.set_trainable(())
    return res


def _backbone_params(model: ModeModel) -> dict[str, np.ndarray]:
    return {n: t.data for n, t in model.named("backbone").items()}


def _with_backbone(backbone: ModeModel, cfg: ModeConfig, extra: dict) -> ModeModel:
    if backbone.cfg.shape_hash() != cfg.shape_hash():
        raise CompositionError("model config does not match the backbone's shape")
    p = {n: a.copy() for n, a in _backbone_params(backbone).items()}
    p.update(extra)
    return ModeModel(cfg, p)


# -- stage 1: single-domain expert -------------------------------------------------------

def train_expert(backbone: ModeModel, domain: DomainCorpus, cfg: ModeConfig,
                 spec: TrainSpec) -> TrainResult:
    """Attach one fresh expert + gates to a frozen backbone and train only those."""
    if cfg.n_experts != 1:
        raise CompositionError(f"expert training needs n_experts=1, got {cfg.n_experts}")
    before = params_hash(_backbone_params(backbone))
    extra = init_expert(cfg, 0, seed=spec.seed)
    extra.update(init_gates(cfg))
    model = _with_backbone(backbone, cfg, extra)
    res = fit(model, domain, spec.with_(trainable=("experts", "gates")))
    if params_hash(_backbone_params(model)) != before:
        raise AssertionError("backbone parameters changed during expert training")
    if spec.steps >= 20 and not res.loss_decreased():
        log.warning("expert loss did not decrease over %d steps", spec.steps)
    return res


def expert_params(model: ModeModel, j: int = 0) -> dict[str, np.ndarray]:
    pre = f"experts.{j}."
    return {n[len(pre):]: t.data for n, t in model.params.items() if n.startswith(pre)}


# -- stage 2: composition ---------------------------------------------------------------

def compose(backbone: ModeModel, experts: list[ModeModel], mixture: DomainCorpus,
            spec: TrainSpec, variant: str = "standard", n_uninitialized: int | None = None,
            gate_backbone_bias: float | None = None) -> TrainResult:
    """Join experts in parallel to the backbone with a fresh gate and fine-tune on mixed data.

    ``standard`` trains experts and gates, ``frozen`` trains gates only,
    ``uninitialized`` ignores ``experts`` and trains ``n_uninitialized`` new
    experts from scratch.
    """
    if variant not in VARIANTS:
        raise CompositionError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if variant == "uninitialized":
        n = n_uninitialized or len(experts)
        if n < 1:
            raise CompositionError("need at least one expert")
        base = experts[0].cfg if experts else backbone.cfg
        cfg = base.with_(n_experts=n, seed=spec.seed)
        if gate_backbone_bias is not None:
            cfg = cfg.with_(gate_backbone_bias=gate_backbone_bias)
        extra = {}
        for j in range(n):
            extra.update(init_expert(cfg, j, seed=spec.seed))
    else:
        if not experts:
            raise CompositionError("need at least one expert")
        shapes = {(e.cfg.shape_hash(), e.cfg.n_blocks, e.cfg.expert_layers_per_block)
                  for e in experts}
        if len(shapes) != 1:
            raise CompositionError("experts were trained with different configurations")
        cfg = experts[0].cfg.with_(n_experts=len(experts))
        if gate_backbone_bias is not None:
            cfg = cfg.with_(gate_backbone_bias=gate_backbone_bias)
        extra = {}
        for j, e in enumerate(experts):
            if e.cfg.n_experts != 1:
                raise CompositionError("each expert checkpoint must hold exactly one expert")
            extra.update({f"experts.{j}.{k}": a.copy() for k, a in expert_params(e).items()})
    extra.update(init_gates(cfg))
    model = _with_backbone(backbone, cfg, extra)
    groups = ("gates",) if variant == "frozen" else ("experts", "gates")
    return fit(model, mixture, spec.with_(trainable=groups))


# -- baselines ------------------------------------------------------------------------

def full_finetune(backbone: ModeModel, data: DomainCorpus, spec: TrainSpec) -> TrainResult:
    model = ModeModel(backbone.cfg.with_(n_experts=0), {n: a.copy() for n, a in
                                                        _backbone_params(backbone).items()})
    return fit(model, data, spec.with_(trainable=("all",)))


def lora_finetune(backbone: ModeModel, data: DomainCorpus, lcfg: LoraConfig,
                  spec: TrainSpec) -> TrainResult:
    model = ModeModel(backbone.cfg.with_(n_experts=0), {n: a.copy() for n, a in
                                                        _backbone_params(backbone).items()})
    attach_lora(model, lcfg, seed=spec.seed)
    return fit(model, data, spec.with_(trainable=("adapters",)))
