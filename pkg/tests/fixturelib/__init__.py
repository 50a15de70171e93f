"""Shared builders for synthetic decompiler dumps used across test modules."""
from .callgraphs import make_fn, twelve_candidate_dump, random_dump, timing_corpus

__all__ = ["make_fn", "twelve_candidate_dump", "random_dump", "timing_corpus"]
