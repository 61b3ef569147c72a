"""Shared 256-symbol vocabulary with one sub-range per domain.

ids 0-3      specials  <pad> <bos> <eos> <unk>
ids 4-18     math      digits 0-9, + - * = ;
ids 32-71    code      keywords, identifiers, numerals, operators, brackets
ids 96-143   english   48 word pieces
"""
from __future__ import annotations

VOCAB_SIZE = 256
PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

MATH_BASE = 4
MATH_MODULUS = 10
MATH_SYMBOLS = [str(i) for i in range(MATH_MODULUS)] + ["+", "-", "*", "=", ";"]
MATH_IDS = {s: MATH_BASE + i for i, s in enumerate(MATH_SYMBOLS)}

CODE_BASE = 32
CODE_KEYWORDS = ["if", "else", "while", "return", "let", "def", "print"]
CODE_IDENTS = ["x", "y", "z", "i", "j", "k", "n", "s"]
CODE_NUMS = [f"#{i}" for i in range(10)]
CODE_OPS = ["+", "-", "*", "<", ">", "=="]
CODE_PUNCT = ["=", "(", ")", "[", "]", "{", "}", ",", ";"]
CODE_SYMBOLS = CODE_KEYWORDS + CODE_IDENTS + CODE_NUMS + CODE_OPS + CODE_PUNCT
CODE_IDS = {s: CODE_BASE + i for i, s in enumerate(CODE_SYMBOLS)}
BRACKET_PAIRS = {CODE_IDS["("]: CODE_IDS[")"], CODE_IDS["["]: CODE_IDS["]"],
                 CODE_IDS["{"]: CODE_IDS["}"]}

ENGLISH_BASE = 96
ENGLISH_SIZE = 48
_ONSETS = ["b", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "w"]
_NUCLEI = ["a", "e", "o", "u"]
ENGLISH_SYMBOLS = [o + v for o in _ONSETS for v in _NUCLEI][:ENGLISH_SIZE]
ENGLISH_IDS = {s: ENGLISH_BASE + i for i, s in enumerate(ENGLISH_SYMBOLS)}

DOMAIN_RANGES = {
    "math": range(MATH_BASE, MATH_BASE + len(MATH_SYMBOLS)),
    "code": range(CODE_BASE, CODE_BASE + len(CODE_SYMBOLS)),
    "english": range(ENGLISH_BASE, ENGLISH_BASE + ENGLISH_SIZE),
}


def id_to_symbol(i: int) -> str:
    if i < len(SPECIALS):
        return SPECIALS[i]
    for dom, rng in DOMAIN_RANGES.items():
        if i in rng:
            table = {"math": MATH_SYMBOLS, "code": CODE_SYMBOLS, "english": ENGLISH_SYMBOLS}[dom]
            return table[i - rng.start]
    return f"<{i}>"


def decode(ids) -> str:
    return " ".join(id_to_symbol(int(i)) for i in ids)
