"""Fused forward/backward kernels on raw numpy arrays.

Each kernel works on C-contiguous arrays and keeps the input dtype. They are
written to minimise temporaries; numpy's vectorised ufuncs are faster here
than scalar compiled loops because tanh/exp dominate.
"""
from __future__ import annotations

import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715


def c_contig(a: np.ndarray) -> np.ndarray:
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


def layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = np.einsum("ij,ij->i", xc, xc)[:, None] / x.shape[-1]
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gamma
    y += beta
    return y, xhat, rstd


def layer_norm_bwd(dy, xhat, gamma, rstd):
    n = xhat.shape[-1]
    dgamma = np.einsum("ij,ij->j", dy, xhat)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    a = dxhat.sum(axis=-1, keepdims=True) / n
    b = np.einsum("ij,ij->i", dxhat, xhat)[:, None] / n
    dxhat -= a
    dxhat -= xhat * b
    dxhat *= rstd
    return dxhat, dgamma, dbeta


def gelu_fwd(x):
    """tanh-approximated GELU; returns (y, tanh term) so backward skips a tanh."""
    dt = x.dtype.type
    u = x * x
    u *= dt(_GELU_K)
    u += 1
    u *= x
    u *= dt(_GELU_C)
    t = np.tanh(u, out=u)
    y = t + 1
    y *= x
    y *= dt(0.5)
    return y, t


def gelu_bwd(x, t, dy):
    dt = x.dtype.type
    du = x * x
    du *= dt(3 * _GELU_K)
    du += 1
    du *= dt(_GELU_C)
    s = t * t
    np.subtract(1, s, out=s)
    s *= x
    s *= du
    s += t
    s += 1
    s *= dt(0.5)
    s *= dy
    return s


_MASKS: dict[int, np.ndarray] = {}


def _future_mask(t: int) -> np.ndarray:
    m = _MASKS.get(t)
    if m is None:
        m = _MASKS[t] = np.triu(np.ones((t, t), dtype=bool), k=1)
    return m


def causal_softmax_fwd(s):
    """Row softmax over keys <= query index; masked entries are exactly zero."""
    z = np.where(_future_mask(s.shape[-1]), -np.inf, s)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z, out=z)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def causal_softmax_bwd(p, dp):
    ds = dp * p
    acc = ds.sum(axis=-1, keepdims=True)
    ds -= p * acc
    return ds


def softmax_xent_fwd(logits, targets):
    """Returns (per-row loss, probabilities)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    rows = np.arange(logits.shape[0])
    picked = z[rows, targets]
    e = np.exp(z, out=z)
    s = e.sum(axis=-1, keepdims=True)
    loss = np.log(s[:, 0]) - picked
    e /= s
    return loss, e


def softmax_xent_bwd(p, targets, scale):
    g = p * p.dtype.type(scale)
    g[np.arange(p.shape[0]), targets] -= p.dtype.type(scale)
    return g
