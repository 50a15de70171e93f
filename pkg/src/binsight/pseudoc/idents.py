"""Identifier token splitting shared by scoring and name evaluation."""
from __future__ import annotations

import re

_CHUNK = re.compile(r"[A-Z]+(?![a-z])|[A-Z][a-z]*|[a-z]+|[0-9]+")

_PLACEHOLDER = re.compile(r"^(sub|loc|nullsub|j_sub)_[0-9A-Fa-f]+$")


def tokenize_identifier(name: str) -> list[str]:
    """Split an identifier into lowercase word tokens.

    Underscores separate chunks; within a chunk, transitions between
    runs of digits, lowercase, and uppercase letters split further, with
    acronyms kept whole ("AES_CBC_encrypt_buffer" gives
    ["aes", "cbc", "encrypt", "buffer"], "parseHTTPRequest2" gives
    ["parse", "http", "request", "2"]).
    """
    tokens: list[str] = []
    for chunk in name.split("_"):
        if not chunk:
            continue
        tokens.extend(m.group(0).lower() for m in _CHUNK.finditer(chunk))
    return tokens


def is_placeholder_name(name: str) -> bool:
    """True for decompiler-generated names such as sub_1909 or loc_4012A0."""
    return not name or _PLACEHOLDER.match(name) is not None
