from __future__ import annotations

import numpy as np
import pytest

from modelab.model import ModeConfig, ModeModel
from modelab.tensor import TAPE, Tensor, backward


def fd_grad_errors(loss_fn, params: dict[str, Tensor], eps: float = 1e-5) -> dict[str, float]:
    """Relative error between taped gradients and central differences, per parameter.

    ``loss_fn()`` must rebuild the graph from ``params`` each call.
    """
    for p in params.values():
        p.grad = None
    TAPE.clear()
    backward(loss_fn())
    errors = {}
    for name, p in params.items():
        got = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up = _value(loss_fn)
            flat[k] = old - eps
            down = _value(loss_fn)
            flat[k] = old
            num.reshape(-1)[k] = (up - down) / (2 * eps)
        denom = max(np.linalg.norm(got), np.linalg.norm(num), 1e-12)
        errors[name] = float(np.linalg.norm(got - num) / denom)
    return errors


def _value(loss_fn) -> float:
    out = loss_fn().item()
    TAPE.clear()
    return out


def tiny_cfg(**kw) -> ModeConfig:
    base = dict(vocab_size=32, d_model=8, n_heads=2, n_backbone_layers=2, n_blocks=2,
                expert_layers_per_block=1, n_experts=1, seq_len=4, precision="float64")
    base.update(kw)
    return ModeConfig(**base)


def randomize(model: ModeModel, seed: int = 0, std: float = 0.3) -> ModeModel:
    """Perturb every parameter so no test sits on a symmetric initialization."""
    rng = np.random.default_rng(seed)
    for name in sorted(model.params):
        t = model.params[name]
        t.data = (t.data + std * rng.standard_normal(t.shape)).astype(t.dtype)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the test session
CRITERIA: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
