"""Width-based clustering and normalization of decompiler type strings.

Decompilers spell the same storage class many ways (``__int64``,
``unsigned __int64``, ``_QWORD``, ``size_t``); for scoring purposes two
type predictions are interchangeable when they denote the same memory
width.  The table below groups scalar spellings into width clusters and
treats all pointer types of equal indirection depth as one cluster.
Qualifiers (``const``, ``volatile``, ``restrict``) never affect
clustering.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

__all__ = [
    "C_KEYWORDS",
    "DEFAULT_CLUSTERS",
    "TypeClusterTable",
    "TypeShape",
    "UnknownType",
    "is_c_identifier",
]

C_KEYWORDS = frozenset({
    "auto", "break", "case", "char", "const", "continue", "default", "do",
    "double", "else", "enum", "extern", "float", "for", "goto", "if",
    "inline", "int", "long", "register", "restrict", "return", "short",
    "signed", "sizeof", "static", "struct", "switch", "typedef", "union",
    "unsigned", "void", "volatile", "while",
})

#: Extra type-ish keywords decompiler output leans on; used by the
#: keyword-weighted n-gram component of the code-similarity metric.
DECOMPILER_TYPE_KEYWORDS = frozenset({
    "__int8", "__int16", "__int32", "__int64", "_BYTE", "_WORD", "_DWORD",
    "_QWORD", "_OWORD", "bool", "size_t", "ssize_t", "int8_t", "int16_t",
    "int32_t", "int64_t", "uint8_t", "uint16_t", "uint32_t", "uint64_t",
})

_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def is_c_identifier(name: str) -> bool:
    """True for a lexically valid C identifier that is not a keyword."""
    return bool(_IDENT_RE.match(name)) and name not in C_KEYWORDS


class UnknownType(Exception):
    """A string could not be read as a type."""

    def __init__(self, text: str, reason: str = "not a parseable type"):
        self.text = text
        self.reason = reason
        super().__init__(f"{reason}: {text!r}")


#: Scalar spellings grouped by storage width.  ``long`` sits in the
#: 4-byte cluster and ``long double`` in the 8-byte cluster (ILP32-style
#: widths, matching the decompiler's own `_DWORD`/`_QWORD` aliases);
#: pass a custom table for other ABIs.
DEFAULT_CLUSTERS: dict[str, tuple[str, ...]] = {
    "w8": (
        "bool", "char", "signed char", "unsigned char",
        "__int8", "signed __int8", "unsigned __int8",
        "_BYTE", "int8_t", "uint8_t",
    ),
    "w16": (
        "short", "short int", "signed short", "signed short int",
        "unsigned short", "unsigned short int",
        "__int16", "signed __int16", "unsigned __int16",
        "_WORD", "int16_t", "uint16_t",
    ),
    "w32": (
        "int", "signed", "unsigned", "signed int", "unsigned int",
        "long", "long int", "signed long", "signed long int",
        "unsigned long", "unsigned long int",
        "__int32", "signed __int32", "unsigned __int32",
        "_DWORD", "int32_t", "uint32_t",
    ),
    "w64": (
        "long long", "long long int", "signed long long",
        "signed long long int", "unsigned long long",
        "unsigned long long int",
        "__int64", "signed __int64", "unsigned __int64",
        "_QWORD", "size_t", "ssize_t", "ptrdiff_t",
        "intptr_t", "uintptr_t", "int64_t", "uint64_t",
    ),
    "w128": (
        "__int128", "signed __int128", "unsigned __int128",
        "_OWORD",
    ),
    "f32": ("float",),
    "f64": ("double", "long double"),
    "void": ("void",),
}

_QUALIFIERS = frozenset({"const", "volatile", "restrict", "__restrict"})
_TAG_KEYWORDS = frozenset({"struct", "union", "enum"})

_TYPE_TOKEN = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*|\d+|\*|\[|\])")


@dataclass(frozen=True)
class TypeShape:
    """Structural reading of a type string.

    ``base`` holds the normalized base-type words with qualifiers and
    struct/union/enum tags removed; ``named`` marks a base that is a
    type name (struct or typedef) rather than a cluster-table spelling;
    ``depth`` counts pointer indirections; ``dims`` the array
    dimensions, ``-1`` for an unsized ``[]``.
    """

    base: tuple[str, ...]
    named: bool
    depth: int
    dims: tuple[int, ...]


class TypeClusterTable:
    """Maps type spellings to cluster ids for equivalence scoring."""

    def __init__(self, clusters: Mapping[str, Sequence[str]] = DEFAULT_CLUSTERS):
        self.clusters = {cid: tuple(members) for cid, members in clusters.items()}
        self._by_words: dict[tuple[str, ...], str] = {}
        for cid, members in self.clusters.items():
            for member in members:
                self._by_words[tuple(member.split())] = cid

    def _tokens(self, text: str) -> list[str]:
        tokens: list[str] = []
        pos = 0
        while pos < len(text):
            m = _TYPE_TOKEN.match(text, pos)
            if m is None:
                if text[pos:].strip():
                    raise UnknownType(text)
                break
            tokens.append(m.group(1))
            pos = m.end()
        return tokens

    def parse(self, text: str) -> TypeShape:
        """Read a type string into a :class:`TypeShape`.

        Accepted shape: qualified base words, then ``*`` runs (qualifiers
        allowed between), then array suffixes.  Raises
        :class:`UnknownType` on anything else.
        """
        tokens = self._tokens(text)
        words: list[str] = []
        i = 0
        while i < len(tokens) and _IDENT_RE.match(tokens[i]):
            if tokens[i] not in _QUALIFIERS:
                words.append(tokens[i])
            i += 1
        depth = 0
        while i < len(tokens) and (tokens[i] == "*" or tokens[i] in _QUALIFIERS):
            if tokens[i] == "*":
                depth += 1
            i += 1
        dims: list[int] = []
        while i < len(tokens) and tokens[i] == "[":
            i += 1
            if i < len(tokens) and tokens[i].isdigit():
                dims.append(int(tokens[i]))
                i += 1
            else:
                dims.append(-1)
            if i >= len(tokens) or tokens[i] != "]":
                raise UnknownType(text, "unterminated array suffix")
            i += 1
        if i != len(tokens):
            raise UnknownType(text)
        if not words:
            raise UnknownType(text, "missing base type")

        if words[0] in _TAG_KEYWORDS:
            if len(words) != 2 or not _IDENT_RE.match(words[1]):
                raise UnknownType(text, "malformed struct/union/enum reference")
            return TypeShape((words[1],), True, depth, tuple(dims))
        key = tuple(words)
        if key in self._by_words:
            return TypeShape(key, False, depth, tuple(dims))
        if len(words) == 1 and is_c_identifier(words[0]):
            return TypeShape(key, True, depth, tuple(dims))
        raise UnknownType(text, "unknown base type spelling")

    def is_known_base(self, shape: TypeShape) -> bool:
        """True when the shape's base is a cluster-table spelling."""
        return not shape.named and shape.base in self._by_words

    def cluster_key(self, text: str) -> tuple:
        """Opaque, hashable cluster identity for a type string.

        Pointer types cluster purely by indirection depth; arrays by
        dimensions plus element cluster; named types by name; scalar
        spellings by their width cluster id.
        """
        return self._shape_key(self.parse(text))

    def _shape_key(self, shape: TypeShape) -> tuple:
        if shape.dims:
            inner = TypeShape(shape.base, shape.named, shape.depth, ())
            return ("array", shape.dims, self._shape_key(inner))
        if shape.depth > 0:
            return ("ptr", shape.depth)
        if shape.named:
            return ("named", shape.base[0])
        return ("scalar", self._by_words[shape.base])

    def match(self, pred: str, gt: str) -> bool:
        """True when both spellings sit in the same cluster."""
        return self.cluster_key(pred) == self.cluster_key(gt)
