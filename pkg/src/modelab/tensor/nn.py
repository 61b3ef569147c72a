"""Neural-network primitives built on the tape: fused kernels plus the decoder layer."""
from __future__ import annotations

import math

import numpy as np

from . import kernels
from .core import DimensionError, Tensor, _record, matmul, add, reshape, transpose, scale


class ConfigError(ValueError):
    """Invalid architecture or hyper-parameter setting."""


def _flat(a: np.ndarray) -> np.ndarray:
    return kernels.c_contig(a.reshape(-1, a.shape[-1]))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    shape = x.shape
    x2 = _flat(x.data)
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gamma.data, beta.data, eps)

    def bw(g):
        dx, dg, db = kernels.layer_norm_bwd(_flat(g), xhat, gamma.data, rstd)
        return dx.reshape(shape), dg, db

    return _record(y.reshape(shape), (x, gamma, beta), bw)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    shape = x.shape
    x2 = _flat(x.data)
    y, th = kernels.gelu_fwd(x2)

    def bw(g):
        return (kernels.gelu_bwd(x2, th, _flat(g)).reshape(shape),)

    return _record(y.reshape(shape), (x,), bw)


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis with keys after the query position masked out."""
    shape = scores.shape
    t = shape[-1]
    s3 = kernels.c_contig(scores.data.reshape(-1, t, t))
    p = kernels.causal_softmax_fwd(s3)

    def bw(g):
        return (kernels.causal_softmax_bwd(p, kernels.c_contig(g.reshape(-1, t, t))).reshape(shape),)

    return _record(p.reshape(shape), (scores,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token-level cross-entropy; ``targets`` has the shape of ``logits`` minus its last axis."""
    shape = logits.shape
    l2 = _flat(logits.data)
    tg = np.ascontiguousarray(np.asarray(targets, dtype=np.int64).reshape(-1))
    if tg.shape[0] != l2.shape[0]:
        raise DimensionError(f"targets {np.shape(targets)} do not match logits {shape}")
    loss, p = kernels.softmax_xent_fwd(l2, tg)
    n = tg.shape[0]
    out = np.asarray(loss.sum(dtype=np.float64) / n, dtype=logits.dtype)

    def bw(g):
        return (kernels.softmax_xent_bwd(p, tg, float(g) / n).reshape(shape),)

    return _record(out, (logits,), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def bw(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (out,)

    return _record(weight.data[ids], (weight,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- decoder layer --------------------------------------------------------------

LAYER_PARAM_NAMES = (
    "ln1.g", "ln1.b", "attn.wqkv", "attn.bqkv", "attn.wo", "attn.bo",
    "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
)


def init_layer_params(rng: np.random.Generator, d: int, dtype, std: float = 0.02,
                      zero_out: bool = False) -> dict[str, np.ndarray]:
    """Pre-norm decoder layer parameters (truncated-normal weights, zero biases).

    ``zero_out`` zeroes both residual output projections so the layer starts
    as the identity map.
    """
    def tn(*shape):
        w = rng.standard_normal(shape)
        bad = np.abs(w) > 2.0
        while bad.any():
            w[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(w) > 2.0
        return (w * std).astype(dtype)

    h = 4 * d
    p = {
        "ln1.g": np.ones(d, dtype), "ln1.b": np.zeros(d, dtype),
        "attn.wqkv": tn(d, 3 * d), "attn.bqkv": np.zeros(3 * d, dtype),
        "attn.wo": tn(d, d), "attn.bo": np.zeros(d, dtype),
        "ln2.g": np.ones(d, dtype), "ln2.b": np.zeros(d, dtype),
        "ffn.w1": tn(d, h), "ffn.b1": np.zeros(h, dtype),
        "ffn.w2": tn(h, d), "ffn.b2": np.zeros(d, dtype),
    }
    if zero_out:
        p["attn.wo"][:] = 0
        p["ffn.w2"][:] = 0
    return p


def transformer_layer_forward(x: Tensor, params: dict[str, Tensor], n_heads: int,
                              adapters: dict | None = None) -> Tensor:
    """Pre-LN causal self-attention + GELU MLP, both with residual connections.

    ``x`` is ``[..., T, d]``. ``adapters`` maps a weight name to a callable
    ``(input, base_output) -> output`` (used for LoRA).
    """
    d = x.shape[-1]
    if n_heads < 1 or d % n_heads:
        raise ConfigError(f"d_model={d} is not divisible by n_heads={n_heads}")
    hd = d // n_heads
    lead = x.shape[:-2]
    t = x.shape[-2]

    def proj(inp, wname, bname):
        out = matmul(inp, params[wname])
        if adapters and wname in adapters:
            out = adapters[wname](inp, out)
        return add(out, params[bname])

    h = layer_norm(x, params["ln1.g"], params["ln1.b"])
    qkv = proj(h, "attn.wqkv", "attn.bqkv")
    qkv = reshape(qkv, (-1, t, 3, n_heads, hd))
    qkv = transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, H, T, hd]
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    att = matmul(causal_softmax(scores), v)  # [B, H, T, hd]
    att = reshape(transpose(att, (0, 2, 1, 3)), lead + (t, d))
    x = add(x, proj(att, "attn.wo", "attn.bo"))

    h = layer_norm(x, params["ln2.g"], params["ln2.b"])
    h = gelu(proj(h, "ffn.w1", "ffn.b1"))
    return add(x, proj(h, "ffn.w2", "ffn.b2"))
