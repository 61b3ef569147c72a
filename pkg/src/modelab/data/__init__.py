"""Synthetic stand-ins for the math, code and english corpora."""
from .corpora import (
    DataConfigError,
    DomainCorpus,
    MixtureSpec,
    brackets_balanced,
    build_english_table,
    english_table,
    english_transition_matrix,
    gen_code,
    gen_english,
    gen_math,
    largest_remainder,
    make_corpus,
    math_equation,
    mix,
    read_tokens,
    write_tokens,
)
from .vocab import VOCAB_SIZE, decode

__all__ = [
    "DataConfigError", "DomainCorpus", "MixtureSpec", "VOCAB_SIZE", "brackets_balanced",
    "build_english_table", "decode", "english_table", "english_transition_matrix", "gen_code",
    "gen_english", "gen_math", "largest_remainder", "make_corpus", "math_equation", "mix",
    "read_tokens", "write_tokens",
]
