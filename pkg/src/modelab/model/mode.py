"""MoDE model: frozen backbone layers with parallel expert stacks mixed by a per-token gate.

Parameter naming (flat dict, stable across block layouts)::

    embed.tok [V, d]            embed.pos [T, d]
    backbone.{k}.{layer param}  k = global backbone layer index
    experts.{j}.{i}.{l}.{...}   expert j, block i, layer l
    gates.{i}.w [d, N+1]        gates.{i}.b [N+1]   (only when N >= 1)
    head.ln.g / head.ln.b       head.out [d, V]
    lora.{target}.A / .B        LoRA adapters, see ``lora.py``

Gate column 0 weights the backbone, column j weights expert j-1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor.core import DimensionError, Tensor, _record, matmul, add, no_grad
from ..tensor.nn import (
    LAYER_PARAM_NAMES,
    embedding,
    init_layer_params,
    layer_norm,
    transformer_layer_forward,
)
from .config import ModeConfig

GROUPS = ("backbone", "experts", "gates", "adapters")


class InputError(ValueError):
    """Token ids outside the vocabulary or sequences longer than the model supports."""


def param_group(name: str) -> str:
    head = name.split(".", 1)[0]
    if head == "experts":
        return "experts"
    if head == "gates":
        return "gates"
    if head == "lora":
        return "adapters"
    return "backbone"


def _seed_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def init_backbone(cfg: ModeConfig) -> dict[str, np.ndarray]:
    dt = np.dtype(cfg.precision)
    d, v = cfg.d_model, cfg.vocab_size
    rng = _seed_rng(cfg.seed, 0)
    p = {
        "embed.tok": (rng.standard_normal((v, d)) * 0.02).astype(dt),
        "embed.pos": (rng.standard_normal((cfg.seq_len, d)) * 0.02).astype(dt),
        "head.ln.g": np.ones(d, dt),
        "head.ln.b": np.zeros(d, dt),
        "head.out": (rng.standard_normal((d, v)) * 0.02).astype(dt),
    }
    for k in range(cfg.n_backbone_layers):
        lp = init_layer_params(_seed_rng(cfg.seed, 1, k), d, dt)
        p.update({f"backbone.{k}.{n}": a for n, a in lp.items()})
    return p


def init_expert(cfg: ModeConfig, j: int, seed: int | None = None) -> dict[str, np.ndarray]:
    """Truncated-normal (std 0.02) expert ``j``, seeded by (seed, expert index)."""
    dt = np.dtype(cfg.precision)
    seed = cfg.seed if seed is None else seed
    p = {}
    for i in range(cfg.n_blocks):
        for l in range(cfg.expert_layers_per_block):
            lp = init_layer_params(_seed_rng(seed, 2, j, i, l), cfg.d_model, dt)
            p.update({f"experts.{j}.{i}.{l}.{n}": a for n, a in lp.items()})
    return p


def init_gates(cfg: ModeConfig) -> dict[str, np.ndarray]:
    """Zero weights and bias (uniform mixing) except an optional backbone-logit offset."""
    dt = np.dtype(cfg.precision)
    n = cfg.n_experts + 1
    p = {}
    if cfg.n_experts == 0:
        return p
    for i in range(cfg.n_blocks):
        b = np.zeros(n, dt)
        b[0] = cfg.gate_backbone_bias
        p[f"gates.{i}.w"] = np.zeros((cfg.d_model, n), dt)
        p[f"gates.{i}.b"] = b
    return p


@dataclass
class GateOutput:
    alphas: Tensor  # [..., T, N+1]


def _gate_logits(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # column-at-a-time products keep each logit's arithmetic independent of
    # column order, so permuting experts with their gate columns is bit-exact
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    cols = [x2 @ np.ascontiguousarray(wd[:, j]) for j in range(wd.shape[1])]
    out = np.stack(cols, axis=-1).reshape(xd.shape[:-1] + (wd.shape[1],)) + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _record(out, (x, w, b), bw)


def _canonical_softmax(z: Tensor) -> Tensor:
    # denominator summed in sorted order: identical bits for any column permutation
    zd = z.data
    e = np.exp(zd - zd.max(axis=-1, keepdims=True))
    es = np.sort(e, axis=-1)
    den = es[..., 0].copy()
    for j in range(1, es.shape[-1]):
        den += es[..., j]
    s = e / den[..., None]

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (z,), bw)


def _mix(alphas: Tensor, outs: list[Tensor]) -> Tensor:
    """Per-token convex combination sum_j alphas[..., j] * outs[j].

    Terms are added in ascending value order per element, so the result does
    not depend on branch order.
    """
    ad = alphas.data
    terms = np.stack([ad[..., j:j + 1] * o.data for j, o in enumerate(outs)])
    terms.sort(axis=0)
    y = terms[0].copy()
    for t in terms[1:]:
        y += t
    datas = [o.data for o in outs]

    def bw(g):
        ga = np.stack([(g * od).sum(axis=-1) for od in datas], axis=-1)
        return (ga,) + tuple(g * ad[..., j:j + 1] for j in range(len(datas)))

    return _record(y, (alphas, *outs), bw)


class ModeModel:
    """Parameter store plus forward pass for a MoDE (or plain backbone) model."""

    def __init__(self, cfg: ModeConfig, params: dict[str, np.ndarray | Tensor]):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        dt = np.dtype(cfg.precision)
        for name, arr in params.items():
            t = arr if isinstance(arr, Tensor) else Tensor(np.array(arr, dtype=dt), name=name)
            t.name = name
            self.params[name] = t
        self.lora = None  # set by attach_lora
        self.set_trainable(())

    @classmethod
    def init(cls, cfg: ModeConfig) -> "ModeModel":
        p = init_backbone(cfg)
        for j in range(cfg.n_experts):
            p.update(init_expert(cfg, j))
        p.update(init_gates(cfg))
        return cls(cfg, p)

    # -- parameter handling -------------------------------------------------
    def set_trainable(self, groups) -> None:
        """Make exactly the parameters in ``groups`` trainable ('all' for everything)."""
        groups = set(GROUPS) if groups == "all" or "all" in groups else set(groups)
        bad = groups - set(GROUPS)
        if bad:
            raise ValueError(f"unknown parameter groups {sorted(bad)}")
        for name, t in self.params.items():
            t.set_trainable(param_group(name) in groups)

    def named(self, group: str | None = None) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if group is None or param_group(n) == group}

    def n_params(self, trainable_only: bool = False) -> int:
        return int(sum(t.data.size for t in self.params.values() if t.trainable or not trainable_only))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward -------------------------------------------------------------
    def _layer(self, prefix: str) -> dict[str, Tensor]:
        return {n: self.params[f"{prefix}.{n}"] for n in LAYER_PARAM_NAMES}

    def _adapters(self, prefix: str):
        return self.lora.layer_adapters(self, prefix) if self.lora is not None else None

    def backbone_branch(self, i: int, x: Tensor) -> Tensor:
        lpb = self.cfg.backbone_layers_per_block
        for k in range(i * lpb, (i + 1) * lpb):
            x = transformer_layer_forward(x, self._layer(f"backbone.{k}"), self.cfg.n_heads,
                                          self._adapters(f"backbone.{k}"))
        return x

    def expert_branch(self, i: int, j: int, x: Tensor) -> Tensor:
        for l in range(self.cfg.expert_layers_per_block):
            x = transformer_layer_forward(x, self._layer(f"experts.{j}.{i}.{l}"), self.cfg.n_heads)
        return x

    def gate_forward(self, i: int, x: Tensor) -> GateOutput:
        """Per-token softmax(Linear(x)) over [backbone, expert 1..N]."""
        if x.shape[-1] != self.cfg.d_model:
            raise DimensionError(f"gate input width {x.shape[-1]} != d_model {self.cfg.d_model}")
        if self.cfg.n_experts == 0:
            return GateOutput(Tensor(np.ones(x.shape[:-1] + (1,), dtype=x.dtype)))
        z = _gate_logits(x, self.params[f"gates.{i}.w"], self.params[f"gates.{i}.b"])
        return GateOutput(_canonical_softmax(z))

    def block_forward(self, i: int, x: Tensor) -> Tensor:
        """y = a_bb * f_bb(x) + sum_j a_j * f_j(x); every branch sees the same x."""
        if x.shape[-1] != self.cfg.d_model:
            raise DimensionError(f"block input width {x.shape[-1]} != d_model {self.cfg.d_model}")
        bb = self.backbone_branch(i, x)
        if self.cfg.n_experts == 0:
            return bb
        outs = [bb] + [self.expert_branch(i, j, x) for j in range(self.cfg.n_experts)]
        return _mix(self.gate_forward(i, x).alphas, outs)

    def embed(self, tokens) -> Tensor:
        ids = self.check_tokens(tokens)
        t = ids.shape[-1]
        tok = embedding(self.params["embed.tok"], ids)
        if self.lora is not None:
            tok = self.lora.embed_adapter(self, ids, tok)
        return add(tok, self.params["embed.pos"][:t])

    def head(self, x: Tensor) -> Tensor:
        h = layer_norm(x, self.params["head.ln.g"], self.params["head.ln.b"])
        return matmul(h, self.params["head.out"])

    def forward(self, tokens) -> Tensor:
        """Next-token logits ``[..., T, vocab]`` for int tokens ``[..., T]``."""
        x = self.embed(tokens)
        for i in range(self.cfg.n_blocks):
            x = self.block_forward(i, x)
        return self.head(x)

    __call__ = forward

    def check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens)
        if ids.ndim == 0 or ids.shape[-1] < 1:
            raise InputError("need at least one token")
        if not np.issubdtype(ids.dtype, np.integer):
            raise InputError(f"token ids must be integers, got {ids.dtype}")
        if ids.shape[-1] > self.cfg.seq_len:
            raise InputError(f"sequence length {ids.shape[-1]} exceeds seq_len {self.cfg.seq_len}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise InputError(f"token id out of range [0, {self.cfg.vocab_size})")
        return ids

    def logits(self, tokens) -> np.ndarray:
        with no_grad():
            return self.forward(tokens).data


def backbone_logits(model: ModeModel, tokens) -> np.ndarray:
    """Run only the backbone layers in sequence, ignoring blocks, experts and gates."""
    with no_grad():
        x = model.embed(tokens)
        for k in range(model.cfg.n_backbone_layers):
            x = transformer_layer_forward(x, model._layer(f"backbone.{k}"), model.cfg.n_heads,
                                          model._adapters(f"backbone.{k}"))
        return model.head(x).data


def permute_experts(model: ModeModel, perm: list[int]) -> ModeModel:
    """Copy of ``model`` with expert ``perm[j]`` moved to slot ``j`` (gate columns follow)."""
    cfg = model.cfg
    if sorted(perm) != list(range(cfg.n_experts)):
        raise ValueError(f"not a permutation of {cfg.n_experts} experts: {perm}")
    src = model.state_dict()
    out = {}
    cols = [0] + [p + 1 for p in perm]
    for name, arr in src.items():
        parts = name.split(".")
        if parts[0] == "experts":
            continue
        if parts[0] == "gates":
            arr = arr[..., cols]
        out[name] = arr.copy()
    for j, pj in enumerate(perm):
        pre = f"experts.{pj}."
        for name, arr in src.items():
            if name.startswith(pre):
                out[f"experts.{j}." + name[len(pre):]] = arr.copy()
    return ModeModel(cfg, out)

