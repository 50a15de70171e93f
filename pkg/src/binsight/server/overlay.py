"""Rename overlays: accepted predictions layered over immutable dumps.

An overlay maps (function, symbol) to the accepted new name (and
optionally type).  The original pseudocode is never mutated — rendering
re-tokenizes the stored text and substitutes identifier tokens on the
fly, so every accepted rename is reversible and the overlay state is a
pure replay of the project's audit log.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass

from ..pseudoc.lexer import IDENT, tokenize

#: Overlay item kinds: a variable rename is scoped to its function, a
#: function rename replaces the name project-wide (header + call sites).
KIND_VARIABLE = "variable"
KIND_FUNCTION = "function"


@dataclass(frozen=True)
class OverlayEntry:
    kind: str
    new_name: str
    new_type: str | None = None

    def to_json(self) -> dict:
        return {"kind": self.kind, "new_name": self.new_name,
                "new_type": self.new_type}


class Overlay:
    """Immutable snapshot of applied renames; updates return new snapshots."""

    def __init__(self, entries: Mapping[tuple[str, str], OverlayEntry] | None = None):
        self._entries: dict[tuple[str, str], OverlayEntry] = dict(entries or {})

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, Overlay) and self._entries == other._entries

    def entry(self, function: str, symbol: str) -> OverlayEntry | None:
        return self._entries.get((function, symbol))

    def with_items(self, items: Iterable[Mapping]) -> "Overlay":
        """New overlay with the items applied; re-applying is idempotent."""
        entries = dict(self._entries)
        for item in items:
            key = (item["function"], item["old"])
            entries[key] = OverlayEntry(kind=item["kind"],
                                        new_name=item["new_name"],
                                        new_type=item.get("new_type"))
        return Overlay(entries)

    def local_renames(self, function: str) -> dict[str, str]:
        """symbol → new name for variable renames scoped to one function."""
        return {old: e.new_name for (fn, old), e in self._entries.items()
                if fn == function and e.kind == KIND_VARIABLE}

    def function_renames(self) -> dict[str, str]:
        """old function name → new name, applied project-wide."""
        return {old: e.new_name for (_, old), e in self._entries.items()
                if e.kind == KIND_FUNCTION}

    def new_types(self, function: str) -> dict[str, str]:
        """symbol → accepted new type for one function."""
        return {old: e.new_type for (fn, old), e in self._entries.items()
                if fn == function and e.new_type}

    def to_json(self) -> dict:
        """Canonical nested form: {function: {symbol: entry}}, sorted."""
        out: dict[str, dict] = {}
        for (fn, old) in sorted(self._entries):
            out.setdefault(fn, {})[old] = self._entries[(fn, old)].to_json()
        return out

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_audit(cls, events: Iterable[Mapping]) -> "Overlay":
        """Replay an audit log into the overlay it produced."""
        overlay = cls()
        for event in events:
            overlay = overlay.with_items(event.get("items", []))
        return overlay


def render_with_overlay(text: str, local: Mapping[str, str],
                        functions: Mapping[str, str] = {}) -> str:
    """Substitute renamed identifier tokens in pseudocode text.

    ``local`` renames win over ``functions`` renames on the same token.
    Only identifier tokens are touched — occurrences inside string
    literals and comments stay as written.
    """
    if not local and not functions:
        return text
    pieces: list[str] = []
    cursor = 0
    for tok in tokenize(text):
        if tok.kind != IDENT:
            continue
        new = local.get(tok.value)
        if new is None:
            new = functions.get(tok.value)
        if new is None or new == tok.value:
            continue
        pieces.append(text[cursor:tok.start])
        pieces.append(new)
        cursor = tok.end
    pieces.append(text[cursor:])
    return "".join(pieces)
