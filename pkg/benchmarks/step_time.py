"""Time one forward plus backward pass of the desk model at a few batch sizes.

    python3 benchmarks/step_time.py --repeat 5
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from modelab.model import ModeModel
from modelab.tensor import TAPE, backward, cross_entropy
from modelab.training.experiments import QUICK


def step_seconds(model: ModeModel, batch: int, repeat: int) -> float:
    cfg = model.cfg
    toks = np.random.default_rng(0).integers(0, cfg.vocab_size, size=(batch, cfg.seq_len + 1))
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        backward(cross_entropy(model.forward(toks[:, :-1]), toks[:, 1:]))
        best = min(best, time.perf_counter() - t0)
        TAPE.clear()
        for p in model.params.values():
            p.grad = None
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--experts", type=int, default=2)
    args = ap.parse_args()
    model = ModeModel.init(QUICK.model.with_(n_experts=args.experts))
    model.set_trainable("all")
    print(f"params={model.n_params()} experts={args.experts}")
    for batch in (1, 4, 16):
        s = step_seconds(model, batch, args.repeat)
        tok = batch * model.cfg.seq_len
        print(f"batch={batch:>3}  {1e3 * s:8.2f} ms  {tok / s:10.0f} tok/s")


if __name__ == "__main__":
    main()
