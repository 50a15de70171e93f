"""Evaluation toolkit: metric primitives, type clustering, and the benchmark runner.

Submodules are imported lazily so that metric-only users do not pull in
the orchestration stack.
"""

from __future__ import annotations

import importlib
from typing import Any

_SUBMODULES = ("clusters", "metrics", "codebleu", "runner")

__all__ = list(_SUBMODULES) + [
    "TypeClusterTable",
    "UnknownType",
    "rouge_name",
    "rouge_name_scores",
    "type_match",
    "struct_f1",
    "StructLayout",
    "StructMember",
    "codebleu_score",
    "codebleu_components",
    "BenchCase",
    "BenchConfig",
    "DatasetError",
    "EvalReport",
    "GroundTruth",
    "LiveAdapter",
    "ReplayAdapter",
    "VarTruth",
    "aggregates_from_rows",
    "load_dataset",
    "make_judge",
    "run_benchmark",
]

_EXPORTS = {
    "TypeClusterTable": "clusters",
    "UnknownType": "clusters",
    "rouge_name": "metrics",
    "rouge_name_scores": "metrics",
    "type_match": "metrics",
    "struct_f1": "metrics",
    "StructLayout": "metrics",
    "StructMember": "metrics",
    "codebleu_score": "codebleu",
    "codebleu_components": "codebleu",
    "BenchCase": "runner",
    "BenchConfig": "runner",
    "DatasetError": "runner",
    "EvalReport": "runner",
    "GroundTruth": "runner",
    "LiveAdapter": "runner",
    "ReplayAdapter": "runner",
    "VarTruth": "runner",
    "aggregates_from_rows": "runner",
    "load_dataset": "runner",
    "make_judge": "runner",
    "run_benchmark": "runner",
}


def __getattr__(name: str) -> Any:
    if name in _SUBMODULES:
        return importlib.import_module(f"{__name__}.{name}")
    if name in _EXPORTS:
        module = importlib.import_module(f"{__name__}.{_EXPORTS[name]}")
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
