"""Scoring primitives: name recall, type equivalence, struct boundaries.

Each metric is a pure function; dataset plumbing lives in
:mod:`binsight.bench.runner`.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from ..pseudoc import tokenize_identifier
from .clusters import TypeClusterTable, UnknownType

__all__ = [
    "StructLayout",
    "StructMember",
    "rouge_name",
    "rouge_name_scores",
    "struct_f1",
    "type_match",
]


def rouge_name_scores(pred: str, gt: str) -> dict:
    """Unigram token overlap between two identifiers (multiset counts).

    Identifiers are split on underscores and case transitions, so
    ``AES_CBC_encrypt_buffer`` and ``aesCbcEncryptBuffer`` share all
    four tokens.  Recall is the headline number; precision and F1 ride
    along for diagnostics.
    """
    pred_tokens = Counter(tokenize_identifier(pred))
    gt_tokens = Counter(tokenize_identifier(gt))
    overlap = sum((pred_tokens & gt_tokens).values())
    recall = overlap / sum(gt_tokens.values()) if gt_tokens else 0.0
    precision = overlap / sum(pred_tokens.values()) if pred_tokens else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return {"recall": recall, "precision": precision, "f1": f1}


def rouge_name(pred: str, gt: str) -> float:
    """Recall of ground-truth name tokens in the prediction, in [0, 1]."""
    return rouge_name_scores(pred, gt)["recall"]


def type_match(pred: str, gt: str, table: TypeClusterTable | None = None) -> bool:
    """True when both type spellings fall in the same width cluster.

    Qualifiers are stripped and pointer spelling normalized by the
    cluster table.  Raises :class:`UnknownType` when the prediction is
    not readable as a type; scoring layers count that as a mismatch.
    """
    table = table or TypeClusterTable()
    try:
        pred_key = table.cluster_key(pred)
    except UnknownType:
        raise UnknownType(pred)
    return pred_key == table.cluster_key(gt)


@dataclass(frozen=True)
class StructMember:
    name: str
    offset: int
    size: int

    def to_json(self) -> dict:
        return {"name": self.name, "offset": self.offset, "size": self.size}


@dataclass(frozen=True)
class StructLayout:
    """A struct as an ordered, non-overlapping member layout."""

    name: str
    total_size: int
    members: tuple[StructMember, ...]

    def __post_init__(self):
        prev_end = 0
        prev_offset = -1
        for m in self.members:
            if m.offset <= prev_offset:
                raise ValueError(
                    f"{self.name}: member offsets must strictly increase")
            if m.offset < prev_end:
                raise ValueError(
                    f"{self.name}: member {m.name!r} overlaps its predecessor")
            if m.offset + m.size > self.total_size:
                raise ValueError(
                    f"{self.name}: member {m.name!r} exceeds total size")
            prev_offset = m.offset
            prev_end = m.offset + m.size
        object.__setattr__(self, "members", tuple(self.members))

    @classmethod
    def from_json(cls, data: dict) -> "StructLayout":
        return cls(
            name=data["name"],
            total_size=data["total_size"],
            members=tuple(
                StructMember(m["name"], m["offset"], m["size"])
                for m in data.get("members", [])),
        )

    def to_json(self) -> dict:
        return {"name": self.name, "total_size": self.total_size,
                "members": [m.to_json() for m in self.members]}

    def boundaries(self) -> set[int]:
        """Interior member start offsets; offset 0 never counts."""
        return {m.offset for m in self.members if m.offset > 0}


def struct_f1(pred: StructLayout, gt: StructLayout) -> dict:
    """Precision/recall/F1 of predicted interior member boundaries.

    A layout with a single member has no interior boundary; two such
    layouts agree vacuously (F1 = 1).  Empty denominators score 0.
    """
    pred_b = pred.boundaries()
    gt_b = gt.boundaries()
    if not pred_b and not gt_b:
        return {"precision": 0.0, "recall": 0.0, "f1": 1.0}
    tp = len(pred_b & gt_b)
    precision = tp / len(pred_b) if pred_b else 0.0
    recall = tp / len(gt_b) if gt_b else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return {"precision": precision, "recall": recall, "f1": f1}
