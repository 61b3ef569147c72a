from __future__ import annotations

import numpy as np

from ..tensor.core import Tensor


class Adam:
    """Adam with bias correction; only touches parameters that are trainable and have a grad."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, clip_norm: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        live = {n: p for n, p in self.params.items() if p.trainable and p.grad is not None}
        if not live:
            return
        self.t += 1
        coef = 1.0
        if self.clip_norm > 0:
            total = np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in live.values()))
            if total > self.clip_norm:
                coef = self.clip_norm / total
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in live.items():
            dt = p.data.dtype.type
            g = p.grad if coef == 1.0 else p.grad * dt(coef)
            if self.weight_decay:
                g = g + dt(self.weight_decay) * p.data
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= dt(self.b1)
            m += dt(1 - self.b1) * g
            v *= dt(self.b2)
            v += dt(1 - self.b2) * (g * g)
            upd = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.data = p.data - dt(self.lr) * upd
