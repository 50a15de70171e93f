"""Tokenizer for decompiler-style pseudo C.

Total over any input: unknown characters become single-character PUNCT
tokens so downstream recovery can always make progress.
"""
from __future__ import annotations

from dataclasses import dataclass

IDENT = "ident"
NUMBER = "number"
STRING = "string"
CHAR = "char"
PUNCT = "punct"

# Longest first so the scanner is greedy.
_OPERATORS = [
    "<<=", ">>=", "...",
    "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "::",
    "+", "-", "*", "/", "%", "<", ">", "=", "!", "&", "|", "^", "~",
    "?", ":", ";", ",", ".", "(", ")", "{", "}", "[", "]",
]

_NUM_SUFFIXES = ("ui64", "ui32", "ui16", "ui8", "i64", "i32", "i16", "i8")


@dataclass
class Token:
    kind: str
    value: str
    start: int
    end: int
    line: int  # 1-based
    col: int   # 1-based


def _is_ident_start(ch: str) -> bool:
    return ch.isalpha() or ch == "_"


def _is_ident_char(ch: str) -> bool:
    return ch.isalnum() or ch == "_"


def tokenize(text: str) -> list[Token]:
    """Lex `text` into tokens, skipping whitespace and comments.

    Token offsets index into `text`; comments and whitespace leave gaps.
    """
    tokens: list[Token] = []
    i = 0
    n = len(text)
    line = 1
    line_start = 0

    def advance_lines(s: str, upto: int, start: int) -> None:
        nonlocal line, line_start
        j = start
        while True:
            k = text.find("\n", j, upto)
            if k == -1:
                break
            line += 1
            line_start = k + 1
            j = k + 1

    while i < n:
        ch = text[i]
        if ch in " \t\r\n":
            j = i
            while j < n and text[j] in " \t\r\n":
                j += 1
            advance_lines(text, j, i)
            i = j
            continue
        if ch == "/" and i + 1 < n and text[i + 1] == "/":
            j = text.find("\n", i)
            i = n if j == -1 else j
            continue
        if ch == "/" and i + 1 < n and text[i + 1] == "*":
            j = text.find("*/", i + 2)
            end = n if j == -1 else j + 2
            advance_lines(text, end, i)
            i = end
            continue
        col = i - line_start + 1
        if _is_ident_start(ch):
            j = i + 1
            while j < n and _is_ident_char(text[j]):
                j += 1
            tokens.append(Token(IDENT, text[i:j], i, j, line, col))
            i = j
            continue
        if ch.isdigit():
            j = _scan_number(text, i)
            tokens.append(Token(NUMBER, text[i:j], i, j, line, col))
            i = j
            continue
        if ch == '"':
            j = _scan_quoted(text, i, '"')
            tokens.append(Token(STRING, text[i:j], i, j, line, col))
            advance_lines(text, j, i)
            i = j
            continue
        if ch == "'":
            j = _scan_quoted(text, i, "'")
            tokens.append(Token(CHAR, text[i:j], i, j, line, col))
            i = j
            continue
        matched = False
        for op in _OPERATORS:
            if text.startswith(op, i):
                tokens.append(Token(PUNCT, op, i, i + len(op), line, col))
                i += len(op)
                matched = True
                break
        if not matched:
            tokens.append(Token(PUNCT, ch, i, i + 1, line, col))
            i += 1
    return tokens


def _scan_number(text: str, i: int) -> int:
    n = len(text)
    j = i
    if text.startswith(("0x", "0X"), i):
        j = i + 2
        while j < n and (text[j].isdigit() or text[j] in "abcdefABCDEF"):
            j += 1
    else:
        while j < n and text[j].isdigit():
            j += 1
        if j < n and text[j] == "." and j + 1 < n and text[j + 1].isdigit():
            j += 1
            while j < n and text[j].isdigit():
                j += 1
        if j < n and text[j] in "eE" and j + 1 < n and (text[j + 1].isdigit() or text[j + 1] in "+-"):
            j += 2
            while j < n and text[j].isdigit():
                j += 1
    # decompiler suffixes: LL, uLL, i64, ui64, u, L ...
    while j < n:
        for suf in _NUM_SUFFIXES:
            if text.startswith(suf, j):
                j += len(suf)
                break
        else:
            if text[j] in "uUlL":
                j += 1
            else:
                break
    return j


def _scan_quoted(text: str, i: int, quote: str) -> int:
    n = len(text)
    j = i + 1
    while j < n:
        if text[j] == "\\":
            j += 2
            continue
        if text[j] == quote:
            return j + 1
        j += 1
    return n  # unterminated: swallow to EOF


def string_literals(tokens: list[Token]) -> list[tuple[int, str]]:
    """(line, inner text) for each double-quoted literal."""
    out = []
    for tok in tokens:
        if tok.kind == STRING:
            inner = tok.value[1:-1] if tok.value.endswith('"') and len(tok.value) >= 2 else tok.value[1:]
            out.append((tok.line, inner))
    return out
