"""Tolerant parser for decompiled pseudo C.

Builds a statement-level AST for one function. Anything outside the
grammar collapses into an Opaque statement via resynchronization at `;`
and `}`; parsing aborts only on unrecoverably unbalanced braces.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .lexer import CHAR, IDENT, NUMBER, PUNCT, STRING, Token, string_literals, tokenize


class NodeKind(str, Enum):
    FunctionDef = "FunctionDef"
    Block = "Block"
    Decl = "Decl"
    Assign = "Assign"
    Call = "Call"
    BinaryOp = "BinaryOp"
    UnaryOp = "UnaryOp"
    Index = "Index"
    Member = "Member"
    Cast = "Cast"
    Identifier = "Identifier"
    Literal = "Literal"
    Return = "Return"
    If = "If"
    For = "For"
    While = "While"
    Break = "Break"
    Goto = "Goto"
    Label = "Label"
    Opaque = "Opaque"


class VarKind(str, Enum):
    Param = "Param"
    Local = "Local"


@dataclass
class AstNode:
    kind: NodeKind
    children: list["AstNode"] = field(default_factory=list)
    span: tuple[int, int, int, int] = (0, 0, 0, 0)  # start_line, start_col, end_line, end_col
    text: str = ""
    op: str = ""          # operator / member name / callee / label / declarator name
    start: int = 0        # byte offsets into the function source
    end: int = 0
    name_offset: int = -1  # declarator nodes: byte offset of the declared name

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass
class VarDecl:
    name: str
    declared_type: str
    kind: VarKind
    position: int = -1
    name_offset: int = -1  # byte offset of the name in the function source


@dataclass
class CallSite:
    callee_name: str
    args: list[AstNode]
    line: int


@dataclass
class PseudoFunction:
    record: "FunctionRecord"  # noqa: F821  (dump.FunctionRecord; kept untyped to avoid a cycle)
    ast: AstNode
    params: list[VarDecl]
    locals: list[VarDecl]
    call_sites: list[CallSite]
    string_literals: list[tuple[int, str]]
    line_count: int

    @property
    def name(self) -> str:
        return self.record.name

    def variables(self) -> list[VarDecl]:
        return list(self.params) + list(self.locals)

    def var_names(self) -> set[str]:
        return {v.name for v in self.variables()}

    def body(self) -> AstNode:
        return self.ast.children[1]

    def top_level_chunks(self) -> list[tuple[int, int]]:
        """Byte ranges (header, each top-level statement, closer) tiling the source."""
        header = self.ast.children[0]
        block = self.ast.children[1]
        chunks = [(0, header.end)]
        for stmt in block.children:
            chunks.append((stmt.start, stmt.end))
        tail_start = block.children[-1].end if block.children else header.end
        chunks.append((tail_start, len(self.record.pseudocode)))
        return chunks


class ParseFailure(Exception):
    def __init__(self, line: int, message: str = "unbalanced braces beyond recovery"):
        self.line = line
        super().__init__(f"line {line}: {message}")


TYPE_KEYWORDS = {
    "void", "char", "short", "int", "long", "float", "double", "bool",
    "signed", "unsigned", "_BOOL", "_BOOL1", "_BOOL2", "_BOOL4", "_BOOL8",
    "__int8", "__int16", "__int32", "__int64", "__int128",
    "_BYTE", "_WORD", "_DWORD", "_QWORD", "_OWORD", "_TBYTE", "_UNKNOWN",
    "__m64", "__m128", "__m128i", "__m128d", "__m256", "__m256i",
    "size_t", "ssize_t", "ptrdiff_t", "intptr_t", "uintptr_t", "wchar_t",
    "uint8_t", "uint16_t", "uint32_t", "uint64_t",
    "int8_t", "int16_t", "int32_t", "int64_t",
}

QUALIFIER_KEYWORDS = {
    "const", "volatile", "static", "register", "extern", "inline",
    "__fastcall", "__cdecl", "__stdcall", "__thiscall", "__usercall",
    "__userpurge", "__noreturn", "__golang", "__unaligned", "__hidden",
    "__spoils", "__near", "__far",
}

AGGREGATE_KEYWORDS = {"struct", "union", "enum"}

STATEMENT_KEYWORDS = {
    "if", "else", "for", "while", "do", "switch", "case", "default",
    "return", "break", "continue", "goto", "sizeof", "__asm", "_asm", "asm",
}

# Call-shaped decompiler intrinsics; parsed as Call nodes but never call sites.
INTRINSIC_MACROS = {
    "LOBYTE", "LOWORD", "LODWORD", "HIBYTE", "HIWORD", "HIDWORD",
    "BYTE1", "BYTE2", "BYTE3", "BYTE4", "BYTE5", "BYTE6",
    "WORD1", "WORD2", "WORD3", "DWORD1", "DWORD2",
    "SLOBYTE", "SLOWORD", "SLODWORD", "SHIBYTE", "SHIWORD", "SHIDWORD",
    "__ROL1__", "__ROL2__", "__ROL4__", "__ROL8__",
    "__ROR1__", "__ROR2__", "__ROR4__", "__ROR8__",
    "__CFADD__", "__OFADD__", "__CFSUB__", "__OFSUB__", "__SETP__",
    "COERCE_DOUBLE", "COERCE_FLOAT", "COERCE_UNSIGNED_INT",
    "COERCE_UNSIGNED_INT64", "ADJ", "CONCAT", "__PAIR64__", "__PAIR32__",
    "va_start", "va_end", "va_arg",
}

_ASSIGN_OPS = {"=", "+=", "-=", "*=", "/=", "%=", "<<=", ">>=", "&=", "|=", "^="}

# precedence-climbing table for binary operators (higher binds tighter)
_BIN_PREC = {
    "||": 1, "&&": 2, "|": 3, "^": 4, "&": 5,
    "==": 6, "!=": 6,
    "<": 7, ">": 7, "<=": 7, ">=": 7,
    "<<": 8, ">>": 8,
    "+": 9, "-": 9,
    "*": 10, "/": 10, "%": 10,
}

_UNARY_OPS = {"*", "&", "+", "-", "!", "~", "++", "--"}


def _looks_like_type_name(name: str) -> bool:
    return name in TYPE_KEYWORDS or name.endswith("_t")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.pos = 0

    # -- token helpers ----------------------------------------------------

    def peek(self, off: int = 0) -> Token | None:
        i = self.pos + off
        return self.tokens[i] if i < len(self.tokens) else None

    def at(self, value: str, off: int = 0) -> bool:
        tok = self.peek(off)
        return tok is not None and tok.value == value

    def take(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, value: str) -> Token:
        tok = self.peek()
        if tok is None or tok.value != value:
            raise _Resync(tok)
        return self.take()

    def _line_at(self, tok: Token | None) -> int:
        if tok is not None:
            return tok.line
        return self.tokens[-1].line if self.tokens else 1

    # -- node construction -------------------------------------------------

    def node(self, kind: NodeKind, start_tok: int, children: list[AstNode] | None = None,
             op: str = "", start: int | None = None) -> AstNode:
        first = self.tokens[start_tok]
        last = self.tokens[self.pos - 1] if self.pos > 0 else first
        s = first.start if start is None else start
        node = AstNode(kind, children or [], text=self.text[s:last.end], op=op,
                       start=s, end=last.end)
        node.span = (first.line, first.col, last.line, last.col + (last.end - last.start))
        return node

    # -- function ----------------------------------------------------------

    def parse_function(self) -> AstNode:
        if not self.tokens:
            raise ParseFailure(1, "empty function body")
        open_idx = self._find_body_open()
        header = self._parse_header(open_idx)
        self.pos = open_idx + 1
        block = self._parse_block_body(block_open_idx=open_idx)
        root = AstNode(NodeKind.FunctionDef, [header, block], text=self.text,
                       start=0, end=len(self.text), op=header.op)
        last = self.tokens[-1]
        root.span = (1, 1, last.line, last.col + (last.end - last.start))
        return root

    def _find_body_open(self) -> int:
        """Index of the `{` opening the function body (first top-level brace)."""
        depth = 0
        for i, tok in enumerate(self.tokens):
            if tok.kind != PUNCT:
                continue
            if tok.value == "(":
                depth += 1
            elif tok.value == ")":
                depth -= 1
            elif tok.value == "{" and depth == 0:
                return i
        raise ParseFailure(self._line_at(self.tokens[-1]), "no function body")

    def _parse_header(self, open_idx: int) -> AstNode:
        """Signature node: everything before the body-opening `{`, plus the `{`."""
        sig_tokens = self.tokens[:open_idx]
        name = ""
        # function name = identifier immediately before the parameter `(`
        for i, tok in enumerate(sig_tokens):
            if tok.kind == PUNCT and tok.value == "(" and i > 0 and sig_tokens[i - 1].kind == IDENT:
                name = sig_tokens[i - 1].value
                break
        if not name:
            raise ParseFailure(self._line_at(self.peek()), "no function name before parameter list")
        open_tok = self.tokens[open_idx]
        node = AstNode(NodeKind.Decl, [], text=self.text[:open_tok.end], op=name,
                       start=0, end=open_tok.end)
        node.span = (1, 1, open_tok.line, open_tok.col + 1)
        return node

    def _parse_block_body(self, block_open_idx: int) -> AstNode:
        """Statements until the `}` matching the function-body `{`."""
        open_tok = self.tokens[block_open_idx]
        stmts: list[AstNode] = []
        prev_end = open_tok.end
        while True:
            tok = self.peek()
            if tok is None:
                raise ParseFailure(self._line_at(self.tokens[-1]))
            if tok.value == "}" and tok.kind == PUNCT:
                close = self.take()
                block = AstNode(NodeKind.Block, stmts, text=self.text[open_tok.start:],
                                start=open_tok.start, end=len(self.text))
                block.span = (open_tok.line, open_tok.col, close.line, close.col + 1)
                return block
            stmt = self.parse_statement()
            stmt.start = prev_end  # leading trivia attaches to the statement
            stmt.text = self.text[stmt.start:stmt.end]
            prev_end = stmt.end
            stmts.append(stmt)

    # -- statements ----------------------------------------------------------

    def parse_statement(self) -> AstNode:
        start_tok = self.pos
        try:
            return self._parse_statement_inner()
        except _Resync:
            self.pos = start_tok
            return self._opaque_statement()
        except RecursionError:
            self.pos = start_tok
            return self._opaque_statement()

    def _parse_statement_inner(self) -> AstNode:
        tok = self.peek()
        if tok is None:
            raise _Resync(None)
        start = self.pos
        v = tok.value
        if tok.kind == PUNCT:
            if v == "{":
                return self._parse_nested_block()
            if v == ";":
                self.take()
                return self.node(NodeKind.Opaque, start)
        if tok.kind == IDENT:
            if v == "if":
                return self._parse_if()
            if v == "for":
                return self._parse_for()
            if v == "while":
                return self._parse_while()
            if v == "do":
                return self._parse_do()
            if v == "switch":
                return self._parse_switch()
            if v in ("case", "default"):
                return self._parse_case_label()
            if v == "return":
                return self._parse_return()
            if v == "break":
                self.take()
                self.expect(";")
                return self.node(NodeKind.Break, start)
            if v == "continue":
                self.take()
                self.expect(";")
                return self.node(NodeKind.Opaque, start)
            if v == "goto":
                self.take()
                target = self.take()
                self.expect(";")
                return self.node(NodeKind.Goto, start, op=target.value)
            if v in ("__asm", "_asm", "asm"):
                raise _Resync(tok)  # opaque, recovery consumes the brace blob
            nxt = self.peek(1)
            if nxt is not None and nxt.value == ":" and nxt.kind == PUNCT and not self.at("::", 1):
                self.take()
                self.take()
                return self.node(NodeKind.Label, start, op=v)
            decl = self._try_parse_decl()
            if decl is not None:
                return decl
        expr = self.parse_expression()
        self.expect(";")
        node = self.node(expr.kind, start, expr.children, op=expr.op)
        return node

    def _opaque_statement(self) -> AstNode:
        """Consume to `;` at depth 0 (inclusive) or to the enclosing `}` (exclusive)."""
        start = self.pos
        depth = 0
        while True:
            tok = self.peek()
            if tok is None:
                raise ParseFailure(self._line_at(self.tokens[-1]))
            if tok.kind == PUNCT:
                if tok.value in "([{":
                    depth += 1
                elif tok.value in ")]":
                    depth = max(0, depth - 1)
                elif tok.value == "}":
                    if depth == 0:
                        break  # enclosing block close: leave it
                    depth -= 1
                    self.take()
                    if depth == 0 and self._brace_blob_complete(start):
                        break
                    continue
                elif tok.value == ";" and depth == 0:
                    self.take()
                    break
            self.take()
        if self.pos == start:
            raise ParseFailure(self._line_at(self.peek()))
        return self.node(NodeKind.Opaque, start)

    def _brace_blob_complete(self, start: int) -> bool:
        # after closing a brace blob (e.g. `__asm { ... }`) stop unless a `;` follows
        tok = self.peek()
        if tok is not None and tok.kind == PUNCT and tok.value == ";":
            self.take()
        return True

    def _parse_nested_block(self) -> AstNode:
        open_idx = self.pos
        open_tok = self.take()
        stmts: list[AstNode] = []
        prev_end = open_tok.end
        while True:
            tok = self.peek()
            if tok is None:
                raise ParseFailure(self._line_at(self.tokens[-1]))
            if tok.kind == PUNCT and tok.value == "}":
                self.take()
                break
            stmt = self.parse_statement()
            stmt.start = prev_end
            stmt.text = self.text[stmt.start:stmt.end]
            prev_end = stmt.end
            stmts.append(stmt)
        return self.node(NodeKind.Block, open_idx, stmts)

    def _parse_if(self) -> AstNode:
        start = self.pos
        self.take()
        self.expect("(")
        cond = self.parse_expression()
        self.expect(")")
        then = self.parse_statement()
        children = [cond, then]
        if self.at("else"):
            self.take()
            children.append(self.parse_statement())
        return self.node(NodeKind.If, start, children)

    def _parse_for(self) -> AstNode:
        start = self.pos
        self.take()
        self.expect("(")
        children: list[AstNode] = []
        if not self.at(";"):
            init = self._try_parse_decl(terminator=";")
            if init is None:
                init = self.parse_expression()
                self.expect(";")
            children.append(init)
        else:
            self.take()
        if not self.at(";"):
            children.append(self.parse_expression())
        self.expect(";")
        if not self.at(")"):
            children.append(self.parse_expression())
        self.expect(")")
        children.append(self.parse_statement())
        return self.node(NodeKind.For, start, children)

    def _parse_while(self) -> AstNode:
        start = self.pos
        self.take()
        self.expect("(")
        cond = self.parse_expression()
        self.expect(")")
        body = self.parse_statement()
        return self.node(NodeKind.While, start, [cond, body])

    def _parse_do(self) -> AstNode:
        start = self.pos
        self.take()
        body = self.parse_statement()
        self.expect("while")
        self.expect("(")
        cond = self.parse_expression()
        self.expect(")")
        self.expect(";")
        return self.node(NodeKind.While, start, [body, cond])

    def _parse_switch(self) -> AstNode:
        start = self.pos
        self.take()
        self.expect("(")
        ctrl = self.parse_expression()
        self.expect(")")
        body = self.parse_statement()
        return self.node(NodeKind.Block, start, [ctrl, body])

    def _parse_case_label(self) -> AstNode:
        start = self.pos
        kw = self.take()
        label = kw.value
        children: list[AstNode] = []
        if kw.value == "case":
            children.append(self.parse_expression())
            label = "case"
        self.expect(":")
        return self.node(NodeKind.Label, start, children, op=label)

    def _parse_return(self) -> AstNode:
        start = self.pos
        self.take()
        children = []
        if not self.at(";"):
            children.append(self.parse_expression())
        self.expect(";")
        return self.node(NodeKind.Return, start, children)

    # -- declarations --------------------------------------------------------

    def _try_parse_decl(self, terminator: str = ";") -> AstNode | None:
        """Parse `type declarator(, declarator)* ;` or rewind and return None."""
        mark = self.pos
        base_end = self._scan_type_prefix()
        if base_end is None:
            self.pos = mark
            return None
        base_text = " ".join(t.value for t in self.tokens[mark:base_end])
        self.pos = base_end
        declarators: list[AstNode] = []
        while True:
            decl = self._parse_declarator(mark, base_text)
            if decl is None:
                self.pos = mark
                return None
            declarators.append(decl)
            tok = self.peek()
            if tok is None:
                self.pos = mark
                return None
            if tok.value == ",":
                self.take()
                continue
            if tok.value == terminator:
                self.take()
                return self.node(NodeKind.Decl, mark, declarators)
            self.pos = mark
            return None

    def _scan_type_prefix(self) -> int | None:
        """Consume type keywords/qualifiers; return end index, or None if not a decl."""
        saw_type = False
        while True:
            tok = self.peek()
            if tok is None or tok.kind != IDENT:
                break
            v = tok.value
            if v in QUALIFIER_KEYWORDS:
                self.take()
                continue
            if v in TYPE_KEYWORDS:
                self.take()
                saw_type = True
                continue
            if v in AGGREGATE_KEYWORDS:
                self.take()
                tag = self.peek()
                if tag is not None and tag.kind == IDENT:
                    self.take()
                saw_type = True
                continue
            if not saw_type:
                # lone identifier can be a typedef name when a declarator follows
                nxt = self.peek(1)
                if nxt is not None and (
                    nxt.kind == IDENT and nxt.value not in STATEMENT_KEYWORDS
                    or (nxt.kind == PUNCT and nxt.value == "*" and self._stars_then_ident(2))
                ):
                    self.take()
                    saw_type = True
                    continue
            break
        return self.pos if saw_type else None

    def _stars_then_ident(self, off: int) -> bool:
        while True:
            tok = self.peek(off)
            if tok is None:
                return False
            if tok.kind == PUNCT and tok.value == "*":
                off += 1
                continue
            return tok.kind == IDENT

    def _parse_declarator(self, decl_start: int, base_text: str) -> AstNode | None:
        start = self.pos
        stars = 0
        while self.at("*"):
            self.take()
            stars += 1
        tok = self.peek()
        if tok is None or tok.kind != IDENT or tok.value in STATEMENT_KEYWORDS:
            return None
        name_tok = self.take()
        suffix = ""
        while self.at("["):
            dims_start = self.pos
            self.take()
            depth = 1
            while depth:
                t = self.peek()
                if t is None:
                    return None
                if t.value == "[":
                    depth += 1
                elif t.value == "]":
                    depth -= 1
                self.take()
            suffix += self.text[self.tokens[dims_start].start:self.tokens[self.pos - 1].end]
        children: list[AstNode] = []
        if self.at("="):
            self.take()
            if self.at("{"):
                init_start = self.pos
                depth = 0
                while True:
                    t = self.peek()
                    if t is None:
                        return None
                    if t.value == "{":
                        depth += 1
                    elif t.value == "}":
                        depth -= 1
                    self.take()
                    if depth == 0:
                        break
                children.append(self.node(NodeKind.Opaque, init_start))
            else:
                children.append(self.parse_expression(no_comma=True))
        declared = base_text + (" " + "*" * stars if stars else "") + suffix
        node = self.node(NodeKind.Decl, start, children, op=name_tok.value)
        node.text = declared  # declarator node carries the reconstructed type
        node.name_offset = name_tok.start
        return node

    # -- expressions -----------------------------------------------------------

    def parse_expression(self, no_comma: bool = False) -> AstNode:
        expr = self._parse_assignment()
        while not no_comma and self.at(","):
            start = expr
            self.take()
            rhs = self._parse_assignment()
            node = AstNode(NodeKind.BinaryOp, [start, rhs], op=",",
                           start=start.start, end=rhs.end,
                           text=self.text[start.start:rhs.end])
            node.span = (start.span[0], start.span[1], rhs.span[2], rhs.span[3])
            expr = node
        return expr

    def _parse_assignment(self) -> AstNode:
        lhs = self._parse_ternary()
        tok = self.peek()
        if tok is not None and tok.kind == PUNCT and tok.value in _ASSIGN_OPS:
            op = self.take().value
            rhs = self._parse_assignment()
            node = AstNode(NodeKind.Assign, [lhs, rhs], op=op,
                           start=lhs.start, end=rhs.end,
                           text=self.text[lhs.start:rhs.end])
            node.span = (lhs.span[0], lhs.span[1], rhs.span[2], rhs.span[3])
            return node
        return lhs

    def _parse_ternary(self) -> AstNode:
        cond = self._parse_binary(1)
        if self.at("?"):
            self.take()
            a = self._parse_assignment()
            self.expect(":")
            b = self._parse_assignment()
            node = AstNode(NodeKind.BinaryOp, [cond, a, b], op="?:",
                           start=cond.start, end=b.end,
                           text=self.text[cond.start:b.end])
            node.span = (cond.span[0], cond.span[1], b.span[2], b.span[3])
            return node
        return cond

    def _parse_binary(self, min_prec: int) -> AstNode:
        lhs = self._parse_unary()
        while True:
            tok = self.peek()
            if tok is None or tok.kind != PUNCT:
                return lhs
            prec = _BIN_PREC.get(tok.value)
            if prec is None or prec < min_prec:
                return lhs
            op = self.take().value
            rhs = self._parse_binary(prec + 1)
            node = AstNode(NodeKind.BinaryOp, [lhs, rhs], op=op,
                           start=lhs.start, end=rhs.end,
                           text=self.text[lhs.start:rhs.end])
            node.span = (lhs.span[0], lhs.span[1], rhs.span[2], rhs.span[3])
            lhs = node

    def _parse_unary(self) -> AstNode:
        tok = self.peek()
        if tok is None:
            raise _Resync(None)
        start = self.pos
        if tok.kind == PUNCT and tok.value in _UNARY_OPS:
            self.take()
            operand = self._parse_unary()
            return self.node(NodeKind.UnaryOp, start, [operand], op=tok.value)
        if tok.kind == IDENT and tok.value == "sizeof":
            self.take()
            if self.at("("):
                self.take()
                depth = 1
                while depth:
                    t = self.peek()
                    if t is None:
                        raise _Resync(None)
                    if t.value == "(":
                        depth += 1
                    elif t.value == ")":
                        depth -= 1
                    self.take()
            else:
                self._parse_unary()
            return self.node(NodeKind.UnaryOp, start, [], op="sizeof")
        if tok.kind == PUNCT and tok.value == "(" and self._cast_lookahead():
            self.take()
            type_start = self.pos
            while not self.at(")"):
                self.take()
            type_text = self.text[self.tokens[type_start].start:self.tokens[self.pos - 1].end] \
                if self.pos > type_start else ""
            self.take()
            operand = self._parse_unary()
            return self.node(NodeKind.Cast, start, [operand], op=type_text)
        return self._parse_postfix()

    def _cast_lookahead(self) -> bool:
        """At `(`: true when the parenthesized tokens read as a type."""
        i = 1
        idents = 0
        saw_kw = False
        saw_star = False
        while True:
            tok = self.peek(i)
            if tok is None:
                return False
            if tok.kind == PUNCT and tok.value == ")":
                break
            if tok.kind == IDENT:
                if tok.value in TYPE_KEYWORDS or tok.value in QUALIFIER_KEYWORDS \
                        or tok.value in AGGREGATE_KEYWORDS:
                    saw_kw = True
                elif _looks_like_type_name(tok.value):
                    saw_kw = True
                    idents += 1
                else:
                    idents += 1
                if idents > 1:
                    return False
            elif tok.kind == PUNCT and tok.value == "*":
                saw_star = True
            else:
                return False
            i += 1
        if i == 1:
            return False
        nxt = self.peek(i + 1)
        if nxt is None:
            return False
        if not (saw_kw or saw_star):
            return False
        # must be followed by something castable
        if nxt.kind in (IDENT, NUMBER, STRING, CHAR):
            return nxt.value not in STATEMENT_KEYWORDS or nxt.value == "sizeof"
        return nxt.kind == PUNCT and nxt.value in ("(", "*", "&", "-", "+", "~", "!", "++", "--")

    def _parse_postfix(self) -> AstNode:
        expr = self._parse_primary()
        while True:
            tok = self.peek()
            if tok is None or tok.kind != PUNCT:
                return expr
            if tok.value == "(" and expr.kind == NodeKind.Identifier:
                self.take()
                args = []
                if not self.at(")"):
                    while True:
                        args.append(self.parse_expression(no_comma=True))
                        if self.at(","):
                            self.take()
                            continue
                        break
                close = self.expect(")")
                node = AstNode(NodeKind.Call, args, op=expr.op,
                               start=expr.start, end=close.end,
                               text=self.text[expr.start:close.end])
                node.span = (expr.span[0], expr.span[1], close.line, close.col + 1)
                expr = node
            elif tok.value == "[":
                self.take()
                index = self.parse_expression()
                close = self.expect("]")
                node = AstNode(NodeKind.Index, [expr, index],
                               start=expr.start, end=close.end,
                               text=self.text[expr.start:close.end])
                node.span = (expr.span[0], expr.span[1], close.line, close.col + 1)
                expr = node
            elif tok.value in (".", "->"):
                op = self.take().value
                member = self.peek()
                if member is None or member.kind != IDENT:
                    raise _Resync(member)
                self.take()
                node = AstNode(NodeKind.Member, [expr], op=op + member.value,
                               start=expr.start, end=member.end,
                               text=self.text[expr.start:member.end])
                node.span = (expr.span[0], expr.span[1], member.line,
                             member.col + (member.end - member.start))
                expr = node
            elif tok.value in ("++", "--"):
                t = self.take()
                node = AstNode(NodeKind.UnaryOp, [expr], op=t.value + "post",
                               start=expr.start, end=t.end,
                               text=self.text[expr.start:t.end])
                node.span = (expr.span[0], expr.span[1], t.line, t.col + len(t.value))
                expr = node
            else:
                return expr

    def _parse_primary(self) -> AstNode:
        tok = self.peek()
        if tok is None:
            raise _Resync(None)
        start = self.pos
        if tok.kind == PUNCT and tok.value == "(":
            self.take()
            inner = self.parse_expression()
            self.expect(")")
            # keep the parenthesized span but reuse the inner structure
            node = self.node(inner.kind, start, inner.children, op=inner.op)
            return node
        if tok.kind == IDENT:
            if tok.value in STATEMENT_KEYWORDS and tok.value != "sizeof":
                raise _Resync(tok)
            self.take()
            return self.node(NodeKind.Identifier, start, op=tok.value)
        if tok.kind in (NUMBER, STRING, CHAR):
            self.take()
            return self.node(NodeKind.Literal, start, op=tok.value)
        raise _Resync(tok)


class _Resync(Exception):
    """Internal: statement-level recovery signal."""

    def __init__(self, tok: Token | None):
        self.tok = tok
        super().__init__("resync")


def parse_pseudocode(record) -> PseudoFunction:
    """Parse one FunctionRecord's pseudocode into a PseudoFunction."""
    text = record.pseudocode
    parser = _Parser(text)
    root = parser.parse_function()
    params = _extract_params(parser, root)
    locals_ = _extract_locals(root, {p.name for p in params})
    call_sites = _extract_call_sites(root)
    strings = string_literals(parser.tokens)
    return PseudoFunction(
        record=record,
        ast=root,
        params=params,
        locals=locals_,
        call_sites=call_sites,
        string_literals=strings,
        line_count=text.count("\n") + 1,
    )


def _extract_params(parser: _Parser, root: AstNode) -> list[VarDecl]:
    header = root.children[0]
    tokens = [t for t in parser.tokens if t.end <= header.end]
    # slice out the top-level parameter list
    open_i = None
    for i, tok in enumerate(tokens):
        if tok.kind == PUNCT and tok.value == "(" and i > 0 and tokens[i - 1].kind == IDENT \
                and tokens[i - 1].value == header.op:
            open_i = i
            break
    if open_i is None:
        return []
    depth = 0
    close_i = None
    for i in range(open_i, len(tokens)):
        if tokens[i].kind != PUNCT:
            continue
        if tokens[i].value == "(":
            depth += 1
        elif tokens[i].value == ")":
            depth -= 1
            if depth == 0:
                close_i = i
                break
    if close_i is None:
        return []
    groups: list[list[Token]] = [[]]
    depth = 0
    for tok in tokens[open_i + 1:close_i]:
        if tok.kind == PUNCT:
            if tok.value in "([":
                depth += 1
            elif tok.value in ")]":
                depth -= 1
            elif tok.value == "," and depth == 0:
                groups.append([])
                continue
        groups[-1].append(tok)
    params: list[VarDecl] = []
    for pos, group in enumerate(groups):
        if not group:
            continue
        if len(group) == 1 and group[0].value == "void":
            continue
        if any(t.value == "..." for t in group):
            continue
        name_tok = None
        for tok in reversed(group):
            if tok.kind == IDENT and tok.value not in TYPE_KEYWORDS \
                    and tok.value not in QUALIFIER_KEYWORDS and tok.value not in AGGREGATE_KEYWORDS:
                prev = group[group.index(tok) - 1] if group.index(tok) > 0 else None
                if prev is not None and prev.kind == IDENT and prev.value in AGGREGATE_KEYWORDS:
                    continue  # struct tag, not the declarator
                name_tok = tok
                break
        if name_tok is None:
            continue
        type_tokens = [t for t in group if t is not name_tok]
        declared = " ".join(t.value for t in type_tokens).strip()
        params.append(VarDecl(name_tok.value, declared, VarKind.Param,
                              position=pos, name_offset=name_tok.start))
    return params


def _extract_locals(root: AstNode, param_names: set[str]) -> list[VarDecl]:
    out: list[VarDecl] = []
    seen = set(param_names)
    body = root.children[1]
    for node in body.walk():
        if node.kind != NodeKind.Decl:
            continue
        for declarator in node.children:
            if declarator.kind != NodeKind.Decl or not declarator.op:
                continue
            if declarator.op in seen:
                continue
            seen.add(declarator.op)
            out.append(VarDecl(declarator.op, declarator.text, VarKind.Local,
                               name_offset=declarator.name_offset))
    return out


def _extract_call_sites(root: AstNode) -> list[CallSite]:
    sites: list[CallSite] = []
    body = root.children[1]
    for node in body.walk():
        if node.kind == NodeKind.Call and node.op and node.op not in INTRINSIC_MACROS:
            sites.append(CallSite(node.op, list(node.children), node.span[0]))
    sites.sort(key=lambda s: (s.line,))
    return sites
