"""Deterministic synthetic corpora: math, code, english, and mixtures.

Every generator is a pure function of ``(seed, n, T)``. Train and test
splits draw from disjoint seed ranges: test seeds are offset by 2**31.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from . import vocab as V

TEST_SEED_OFFSET = 2**31
_DOMAIN_KEY = {"math": 11, "code": 12, "english": 13}


class DataConfigError(ValueError):
    """Incompatible corpora or invalid generator arguments."""


@dataclass
class DomainCorpus:
    domain: str
    tokens: np.ndarray  # [n, T] int32
    split: str = "train"
    seed: int = 0
    labels: np.ndarray | None = field(default=None, repr=False)  # per-row domain, mixtures only

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def head(self, k: int) -> "DomainCorpus":
        lab = None if self.labels is None else self.labels[:k]
        return DomainCorpus(self.domain, self.tokens[:k], self.split, self.seed, lab)


def _check(n: int, T: int) -> None:
    if n < 1 or T < 1:
        raise DataConfigError(f"n and T must be >= 1 (got n={n}, T={T})")


def _rng(domain: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([_DOMAIN_KEY[domain], int(seed)])


# -- math -------------------------------------------------------------------------

def math_equation(a: int, op: str, b: int) -> int:
    m = V.MATH_MODULUS
    return {"+": (a + b) % m, "-": (a - b) % m, "*": (a * b) % m}[op]


def gen_math(seed: int, n: int, T: int) -> DomainCorpus:
    """Streams of ``a op b = c ;`` with c = (a op b) mod 10, cut to length T."""
    _check(n, T)
    rng = _rng("math", seed)
    ids = V.MATH_IDS
    ops = ["+", "-", "*"]
    out = np.empty((n, T), dtype=np.int32)
    n_eq = T // 6 + 1
    for r in range(n):
        ab = rng.integers(0, V.MATH_MODULUS, size=(n_eq, 2))
        oi = rng.integers(0, 3, size=n_eq)
        row = [V.BOS]
        for (a, b), o in zip(ab, oi):
            op = ops[o]
            c = math_equation(int(a), op, int(b))
            row += [ids[str(a)], ids[op], ids[str(b)], ids["="], ids[str(c)], ids[";"]]
        out[r] = row[:T]
    return DomainCorpus("math", out, seed=seed)


# -- code -------------------------------------------------------------------------

class _CodeGrammar:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.t = V.CODE_IDS

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def ident(self):
        return [self.t[self.pick(V.CODE_IDENTS)]]

    def expr(self, depth: int):
        r = self.rng.random()
        if depth <= 0 or r < 0.45:
            if self.rng.random() < 0.6:
                return self.ident()
            return [self.t[self.pick(V.CODE_NUMS)]]
        if r < 0.7:
            return self.ident() + [self.t["["]] + self.expr(depth - 1) + [self.t["]"]]
        op = self.pick(["+", "-", "*"])
        return [self.t["("]] + self.expr(depth - 1) + [self.t[op]] + self.expr(depth - 1) + [self.t[")"]]

    def cond(self, depth: int):
        return self.expr(depth) + [self.t[self.pick(["<", ">", "=="])]] + self.expr(depth)

    def body(self, depth: int):
        out = [self.t["{"]]
        for _ in range(1 + int(self.rng.integers(2))):
            out += self.stmt(depth - 1)
        return out + [self.t["}"]]

    def stmt(self, depth: int):
        t = self.t
        r = self.rng.random()
        if depth > 0 and r < 0.2:
            s = [t["if"], t["("]] + self.cond(depth - 1) + [t[")"]] + self.body(depth)
            if self.rng.random() < 0.3:
                s += [t["else"]] + self.body(depth)
            return s
        if depth > 0 and r < 0.3:
            return [t["while"], t["("]] + self.cond(depth - 1) + [t[")"]] + self.body(depth)
        if r < 0.6:
            return [t["let"]] + self.ident() + [t["="]] + self.expr(2) + [t[";"]]
        if r < 0.8:
            args = self.expr(1)
            for _ in range(int(self.rng.integers(2))):
                args += [t[","]] + self.expr(1)
            return [t["print"], t["("]] + args + [t[")"], t[";"]]
        return [t["return"]] + self.expr(2) + [t[";"]]


def gen_code(seed: int, n: int, T: int) -> DomainCorpus:
    """Programs from a small probabilistic grammar; every row is bracket-balanced.

    Whole statements are appended while they fit; leftover positions are
    filled with empty statements (``;``).
    """
    _check(n, T)
    rng = _rng("code", seed)
    g = _CodeGrammar(rng)
    semi = V.CODE_IDS[";"]
    out = np.empty((n, T), dtype=np.int32)
    for r in range(n):
        row = [V.BOS]
        misses = 0
        while len(row) < T and misses < 4:
            s = g.stmt(2)
            if len(row) + len(s) <= T:
                row += s
                misses = 0
            else:
                misses += 1
        row += [semi] * (T - len(row))
        out[r] = row
    return DomainCorpus("code", out, seed=seed)


def brackets_balanced(row) -> bool:
    closers = {c: o for o, c in V.BRACKET_PAIRS.items()}
    stack = []
    for tok in row:
        tok = int(tok)
        if tok in V.BRACKET_PAIRS:
            stack.append(tok)
        elif tok in closers:
            if not stack or stack.pop() != closers[tok]:
                return False
    return not stack


# -- english ----------------------------------------------------------------------

ENGLISH_PROFILE = (0.55, 0.25, 0.15, 0.05)
_TABLE_FILE = "english_table.json"


def build_english_table(seed: int = 20240611) -> dict:
    """Order-2 chain: successors depend on the previous word, their weights on the one before.

    Returns ``{"successors": [E][4], "perm": [E][E][4]}``; the probability of
    ``successors[b][k]`` after ``(a, b)`` is ``ENGLISH_PROFILE[perm[a][b][k]]``.
    """
    rng = np.random.default_rng(seed)
    e = V.ENGLISH_SIZE
    succ = [sorted(rng.choice(e, size=4, replace=False).tolist()) for _ in range(e)]
    perm = [[rng.permutation(4).tolist() for _ in range(e)] for _ in range(e)]
    return {"profile": list(ENGLISH_PROFILE), "successors": succ, "perm": perm}


@lru_cache(maxsize=1)
def english_table() -> dict:
    """The baked transition table shipped with the package."""
    text = resources.files(__package__).joinpath(_TABLE_FILE).read_text()
    return json.loads(text)


@lru_cache(maxsize=1)
def english_transition_matrix() -> np.ndarray:
    """Dense P[a, b, c] over word indices (0-based within the english range)."""
    tab = english_table()
    e = V.ENGLISH_SIZE
    P = np.zeros((e, e, e))
    prof = np.asarray(tab["profile"])
    for a in range(e):
        for b in range(e):
            for k, c in enumerate(tab["successors"][b]):
                P[a, b, c] = prof[tab["perm"][a][b][k]]
    return P


def gen_english(seed: int, n: int, T: int) -> DomainCorpus:
    """Order-2 Markov text over the 48 english word pieces."""
    _check(n, T)
    rng = _rng("english", seed)
    tab = english_table()
    succ = np.asarray(tab["successors"])
    perm = np.asarray(tab["perm"])
    prof = np.cumsum(tab["profile"])
    e = V.ENGLISH_SIZE
    out = np.empty((n, T), dtype=np.int32)
    for r in range(n):
        a = int(rng.integers(e))
        b = int(succ[a][int(rng.integers(4))])
        words = [a, b]
        u = rng.random(T)
        while len(words) < T - 1:
            # pick profile rank, then the successor holding that rank
            rank = int(np.searchsorted(prof, u[len(words)], side="right"))
            rank = min(rank, 3)
            k = int(np.nonzero(perm[a][b] == rank)[0][0])
            a, b = b, int(succ[b][k])
            words.append(b)
        out[r] = [V.BOS] + [V.ENGLISH_BASE + w for w in words[:T - 1]]
    return DomainCorpus("english", out, seed=seed)


GENERATORS = {"math": gen_math, "code": gen_code, "english": gen_english}


def make_corpus(domain: str, split: str, seed: int, n: int, T: int) -> DomainCorpus:
    """Corpus for a split; the test split uses seeds disjoint from every train seed."""
    if domain not in GENERATORS:
        raise DataConfigError(f"unknown domain {domain!r}")
    if split not in ("train", "test"):
        raise DataConfigError(f"unknown split {split!r}")
    if not 0 <= seed < TEST_SEED_OFFSET:
        raise DataConfigError(f"seed must be in [0, 2**31), got {seed}")
    eff = seed + (TEST_SEED_OFFSET if split == "test" else 0)
    c = GENERATORS[domain](eff, n, T)
    c.split = split
    return c


# -- mixtures -----------------------------------------------------------------------

@dataclass
class MixtureSpec:
    components: list[DomainCorpus]
    proportions: list[float]
    budget: int
    seed: int = 0

    def __post_init__(self):
        if len(self.components) != len(self.proportions) or not self.components:
            raise DataConfigError("need one proportion per component")
        if any(p < 0 for p in self.proportions) or abs(sum(self.proportions) - 1.0) > 1e-9:
            raise DataConfigError(f"proportions must be >= 0 and sum to 1, got {self.proportions}")
        if self.budget < 0:
            raise DataConfigError("budget must be >= 0")


def largest_remainder(proportions, budget: int) -> list[int]:
    raw = [p * budget for p in proportions]
    counts = [int(np.floor(r)) for r in raw]
    left = budget - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def mix(spec: MixtureSpec) -> DomainCorpus:
    """Take a prefix of each component (exact largest-remainder counts) and shuffle.

    Prefixes make smaller budgets subsets of larger ones.
    """
    T = {c.seq_len for c in spec.components}
    if len(T) != 1:
        raise DataConfigError(f"components disagree on sequence length: {sorted(T)}")
    counts = largest_remainder(spec.proportions, spec.budget)
    rows, labels = [], []
    for c, k in zip(spec.components, counts):
        if k > c.n:
            raise DataConfigError(f"{c.domain} corpus has {c.n} rows, mixture needs {k}")
        rows.append(c.tokens[:k])
        labels += [c.domain] * k
    tokens = np.concatenate(rows) if rows else np.empty((0, T.pop()), np.int32)
    perm = np.random.default_rng([14, spec.seed]).permutation(len(tokens))
    name = "+".join(c.domain for c, k in zip(spec.components, counts) if k) or "empty"
    split = spec.components[0].split
    return DomainCorpus(name, tokens[perm], split, spec.seed, np.asarray(labels)[perm])


# -- text export ----------------------------------------------------------------------

def write_tokens(corpus: DomainCorpus, path: str | Path) -> None:
    """One sequence per line as space-separated ids, after a ``#`` header line."""
    lines = [f"# domain={corpus.domain} split={corpus.split} seed={corpus.seed} "
             f"n={corpus.n} T={corpus.seq_len}"]
    lines += [" ".join(map(str, row)) for row in corpus.tokens.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_tokens(path: str | Path) -> DomainCorpus:
    text = Path(path).read_text().splitlines()
    meta = dict(kv.split("=", 1) for kv in text[0].lstrip("# ").split())
    rows = [list(map(int, ln.split())) for ln in text[1:] if ln.strip()]
    return DomainCorpus(meta["domain"], np.asarray(rows, dtype=np.int32).reshape(-1, int(meta["T"])),
                        meta["split"], int(meta["seed"]))
