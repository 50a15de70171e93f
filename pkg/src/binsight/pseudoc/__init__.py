"""Pseudo-C front end: lexing, tolerant parsing, and dump interchange."""
from .dump import (
    DecompDump,
    DumpError,
    DuplicateFunction,
    EmptyDump,
    FunctionRecord,
    parse_dump,
    write_dump,
)
from .idents import is_placeholder_name, tokenize_identifier
from .lexer import Token, string_literals, tokenize
from .parser import (
    AstNode,
    CallSite,
    NodeKind,
    ParseFailure,
    PseudoFunction,
    VarDecl,
    VarKind,
    parse_pseudocode,
)

__all__ = [
    "AstNode",
    "CallSite",
    "DecompDump",
    "DumpError",
    "DuplicateFunction",
    "EmptyDump",
    "FunctionRecord",
    "NodeKind",
    "ParseFailure",
    "PseudoFunction",
    "Token",
    "VarDecl",
    "VarKind",
    "is_placeholder_name",
    "parse_dump",
    "parse_pseudocode",
    "string_literals",
    "tokenize",
    "tokenize_identifier",
    "write_dump",
]
