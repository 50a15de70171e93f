"""Per-item application views of task predictions.

A prediction payload is a single JSON document; applying it back into
the code view happens item by item (one function rename, one variable
rename at a time), each individually accepted or rejected.  This module
derives the applicable items from a payload and attributes semantic
violations to the single item that caused them, so a response with one
bad entry still exposes every good entry for review.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from ..bench.clusters import TypeClusterTable
from ..promptkit import Prediction, TaskSpec, validate_prediction
from ..pseudoc import PseudoFunction
from .overlay import KIND_FUNCTION, KIND_VARIABLE

_RENAME_FAMILIES = ("vars", "args", "var", "arg", "func-analysis")
_FUNCNAME_FAMILIES = ("funcname", "signature", "func-analysis")


@dataclass(frozen=True)
class ApplyItem:
    """One accept/reject unit of a prediction, with its own verdict."""

    index: int
    kind: str  # KIND_FUNCTION or KIND_VARIABLE
    function: str
    old: str
    new_name: str
    new_type: str | None
    ok: bool
    violations: tuple[str, ...]

    def to_json(self) -> dict:
        return {"index": self.index, "kind": self.kind,
                "function": self.function, "old": self.old,
                "new_name": self.new_name, "new_type": self.new_type,
                "ok": self.ok, "violations": list(self.violations)}

    def as_overlay_item(self) -> dict:
        return {"kind": self.kind, "function": self.function,
                "old": self.old, "new_name": self.new_name,
                "new_type": self.new_type}


def _violations(task: TaskSpec, payload: dict, target: PseudoFunction,
                clusters: TypeClusterTable | None) -> Counter:
    pred = Prediction(task=task, reasoning="", payload=payload, raw="")
    report = validate_prediction(pred, target, clusters)
    return Counter(f"{v.code.value}: {v.detail}" for v in report.violations)


def _attributed(with_item: Counter, base: Counter) -> tuple[str, ...]:
    """Violations present with the item but not explained by the base payload."""
    return tuple(sorted((with_item - base).elements()))


def derive_items(task: TaskSpec, payload: dict | None,
                 target: PseudoFunction,
                 clusters: TypeClusterTable | None = None) -> list[ApplyItem]:
    """Applicable items of a payload, each validated in isolation.

    Item violations are computed differentially: the payload is
    validated with and without the item, and only the difference is
    attributed to it, so e.g. a missing summary elsewhere in the payload
    never disqualifies a perfectly good rename.
    """
    if not isinstance(payload, dict):
        return []
    items: list[ApplyItem] = []

    if task.family in _FUNCNAME_FAMILIES and payload.get("function_name") is not None:
        name = payload["function_name"]
        base = _violations(task, {}, target, clusters)
        with_item = _violations(task, {"function_name": name}, target, clusters)
        violations = _attributed(with_item, base)
        items.append(ApplyItem(
            index=len(items), kind=KIND_FUNCTION, function=target.name,
            old=target.name,
            new_name=name if isinstance(name, str) else "",
            new_type=None, ok=not violations, violations=violations))

    if task.family in _RENAME_FAMILIES:
        structs = payload.get("structs", [])
        base = _violations(task, {"variables": [], "structs": structs},
                           target, clusters)
        for entry in payload.get("variables", []):
            if not isinstance(entry, dict):
                continue
            with_item = _violations(
                task, {"variables": [entry], "structs": structs},
                target, clusters)
            violations = _attributed(with_item, base)
            old = entry.get("old")
            new_name = entry.get("new_name")
            new_type = entry.get("new_type")
            items.append(ApplyItem(
                index=len(items), kind=KIND_VARIABLE, function=target.name,
                old=old if isinstance(old, str) else "",
                new_name=new_name if isinstance(new_name, str) else "",
                new_type=new_type if isinstance(new_type, str) else None,
                ok=not violations, violations=violations))
    return items
