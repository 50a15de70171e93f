"""Variable data-flow tracing across the call graph.

Starting from one variable of a target function, tracing propagates
alias relationships through plain assignments between simple
expressions, forward into callees through call arguments, and backward
from callers' actual arguments, logging every use of a traced variable.
Propagation runs to a fixpoint; every merge is a union or minimum, so
the result is the unique least fixpoint regardless of sweep order.

Simple expression forms (the only shapes that propagate): a bare
variable, *x, &x, x[e], x.m, x->m. A two-term x+e / x-e form refines
the alias by substitution, and only where it appears as a call
argument. Everything else logs a plain expression use.

An assignment gives aliases only to a side that is a bare variable (a
form like ``*p`` cannot be solved for ``p``); the giving side's aliases
are substituted into the giving form's text.  Substituting through a
non-identity form counts as one wrap, and an alias is dropped once it
would exceed MAX_WRAPS wraps or MAX_ALIAS_LEN characters, which keeps
cyclic flows finite.
"""
from __future__ import annotations

import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum

from .cgraph import CallGraph, ContextConfig, UnknownFunction
from .pseudoc import AstNode, NodeKind, PseudoFunction

MAX_ALIAS_LEN = 160
MAX_WRAPS = 8
MAX_ALIASES = 4096  # hard ceiling per variable; unreachable in sane input


class UnknownVariable(Exception):
    def __init__(self, var: str):
        self.var = var
        super().__init__(f"unknown variable {var!r}")


class TraceRule(str, Enum):
    Def = "Def"
    Expr = "Expr"
    AssignLR = "AssignLR"
    AssignRL = "AssignRL"
    CalleeSimple = "CalleeSimple"
    CalleeExpr = "CalleeExpr"
    Caller = "Caller"


# precedence when one occurrence qualifies under several rules
_RULE_RANK = {
    TraceRule.Def: 0,
    TraceRule.AssignLR: 1,
    TraceRule.AssignRL: 2,
    TraceRule.CalleeSimple: 3,
    TraceRule.CalleeExpr: 4,
    TraceRule.Caller: 5,
    TraceRule.Expr: 6,
}


@dataclass(frozen=True)
class UsageRecord:
    function: str
    line: int
    statement_text: str
    variable: str
    alias: str
    rule: TraceRule

    def to_json(self) -> dict:
        return {
            "function": self.function,
            "line": self.line,
            "statement_text": self.statement_text,
            "variable": self.variable,
            "alias": self.alias,
            "rule": self.rule.value,
        }


@dataclass
class TraceStats:
    functions_visited: int
    elapsed_seconds: float


@dataclass
class TraceState:
    traced: set[tuple[str, str]] = field(default_factory=set)
    aliases: dict[tuple[str, str], set[str]] = field(default_factory=dict)
    visited_callees: set[str] = field(default_factory=set)
    visited_callers: set[str] = field(default_factory=set)


@dataclass
class TraceReport:
    origin: tuple[str, str]
    usages: list[UsageRecord]
    aliases: dict[tuple[str, str], list[str]]
    stats: TraceStats

    def alias_of(self, function: str, variable: str) -> list[str]:
        return self.aliases.get((function, variable), [])

    def to_json(self) -> dict:
        return {
            "origin": {"function": self.origin[0], "variable": self.origin[1]},
            "usages": [u.to_json() for u in self.usages],
            "aliases": [
                {"function": f, "variable": v, "aliases": a}
                for (f, v), a in sorted(self.aliases.items())
            ],
            "stats": {
                "functions_visited": self.stats.functions_visited,
                "elapsed_seconds": self.stats.elapsed_seconds,
            },
        }


def _simple_base(node: AstNode) -> AstNode | None:
    """The base identifier of a simple form, or None."""
    if node.kind is NodeKind.Identifier:
        return node
    if node.kind is NodeKind.UnaryOp and node.op in ("*", "&") and node.children:
        return _simple_base(node.children[0])
    if node.kind in (NodeKind.Index, NodeKind.Member) and node.children:
        return _simple_base(node.children[0])
    return None


def _addsub_bases(node: AstNode) -> list[AstNode]:
    """Simple bases of a two-term +/- expression; empty if not that shape."""
    if node.kind is not NodeKind.BinaryOp or node.op not in ("+", "-"):
        return []
    if len(node.children) != 2:
        return []
    bases = []
    for child in node.children:
        base = _simple_base(child)
        if base is None and child.kind is not NodeKind.Literal:
            return []
        if base is not None:
            bases.append(base)
    return bases


@dataclass(frozen=True)
class _Site:
    """One propagating occurrence: a base identifier inside a form expression."""
    base_name: str
    base_start: int
    prefix: str  # form text before the base
    suffix: str  # form text after the base

    @property
    def bare(self) -> bool:
        return not self.prefix and not self.suffix

    def substitute(self, alias: str) -> str:
        return self.prefix + alias + self.suffix


def _site(fn_text: str, form: AstNode, base: AstNode) -> _Site:
    return _Site(base.op, base.start,
                 fn_text[form.start:base.start], fn_text[base.end:form.end])


@dataclass
class _CallInfo:
    callee: str
    line: int
    args: list[list[tuple[_Site, str]]]  # per position: (site, "simple"|"addsub")


@dataclass
class _AssignInfo:
    line: int
    lhs: _Site
    rhs: _Site


class _FnIndex:
    """Statement-shape index of one function, reused across traces."""

    def __init__(self, fn: PseudoFunction):
        self.fn = fn
        text = fn.record.pseudocode
        self.lines = text.split("\n")
        self.var_names = fn.var_names()
        self.decl_at: dict[str, tuple[int, int]] = {}  # var -> (line, offset)
        for v in fn.variables():
            if v.name_offset >= 0:
                line = text.count("\n", 0, v.name_offset) + 1
                self.decl_at[v.name] = (line, v.name_offset)
        self.occurrences: list[tuple[str, int, int]] = []  # (var, line, offset)
        self.assigns: list[_AssignInfo] = []
        self.calls: list[_CallInfo] = []
        for node in fn.body().walk():
            if node.kind is NodeKind.Identifier and node.op in self.var_names:
                self.occurrences.append((node.op, node.span[0], node.start))
            elif node.kind is NodeKind.Assign and node.op == "=" and len(node.children) == 2:
                lhs_base = _simple_base(node.children[0])
                rhs_base = _simple_base(node.children[1])
                if lhs_base is not None and rhs_base is not None \
                        and lhs_base.op in self.var_names and rhs_base.op in self.var_names:
                    self.assigns.append(_AssignInfo(
                        node.span[0],
                        _site(text, node.children[0], lhs_base),
                        _site(text, node.children[1], rhs_base)))
            elif node.kind is NodeKind.Call and node.op:
                args = []
                for arg in node.children:
                    sites: list[tuple[_Site, str]] = []
                    base = _simple_base(arg)
                    if base is not None and base.op in self.var_names:
                        sites.append((_site(text, arg, base), "simple"))
                    else:
                        for b in _addsub_bases(arg):
                            if b.op in self.var_names:
                                sites.append((_site(text, arg, b), "addsub"))
                    args.append(sites)
                self.calls.append(_CallInfo(node.op, node.span[0], args))
        self.occurrences.sort(key=lambda o: o[2])

    def line_text(self, line: int) -> str:
        if 1 <= line <= len(self.lines):
            return self.lines[line - 1].strip()
        return ""


class _Tracer:
    def __init__(self, graph: CallGraph, cfg: ContextConfig):
        self.graph = graph
        self.cfg = cfg
        cache = getattr(graph, "_dflow_indexes", None)
        if cache is None:
            cache = {}
            graph._dflow_indexes = cache
        self.indexes: dict[str, _FnIndex] = cache

    def index(self, name: str) -> _FnIndex:
        idx = self.indexes.get(name)
        if idx is None:
            idx = _FnIndex(self.graph.nodes[name])
            self.indexes[name] = idx
        return idx

    def trace(self, target: str, var: str) -> TraceReport:
        start_time = time.perf_counter()
        fn = self.graph.function(target)
        if var not in fn.var_names():
            raise UnknownVariable(var)
        origin = (target, var)
        # pair -> {alias: minimum wrap count}; budgets as max remaining hops
        aliases: dict[tuple[str, str], dict[str, int]] = {origin: {f"{var}@{target}": 0}}
        callee_budget = {origin: self.cfg.depth_callee}
        caller_budget = {origin: self.cfg.depth_caller}
        derived: dict[tuple[str, str], set[TraceRule]] = {origin: {TraceRule.Def}}
        reach: dict[str, tuple[int, int]] = {target: (0, 0)}
        self._fixpoint(aliases, callee_budget, caller_budget, derived, reach)
        usages = self._collect(origin, aliases, callee_budget, caller_budget, derived, reach)
        elapsed = time.perf_counter() - start_time
        final = {pair: sorted(vals) for pair, vals in aliases.items()}
        stats = TraceStats(functions_visited=len({f for f, _ in aliases}), elapsed_seconds=elapsed)
        return TraceReport(origin, usages, final, stats)

    # -- propagation -------------------------------------------------------

    def _add(self, aliases, pair, new_aliases, kind, derived,
             callee_budget, caller_budget, cb, crb) -> bool:
        """Merge (alias -> wrap count) candidates and budgets into a pair."""
        changed = False
        bucket = aliases.setdefault(pair, {})
        for alias, wraps in new_aliases.items():
            if wraps > MAX_WRAPS or len(alias) > MAX_ALIAS_LEN:
                continue
            cur = bucket.get(alias)
            if cur is None and len(bucket) >= MAX_ALIASES:
                continue
            if cur is None or wraps < cur:
                bucket[alias] = wraps
                changed = True
        kinds = derived.setdefault(pair, set())
        if kind not in kinds:
            kinds.add(kind)
            changed = True
        if callee_budget.get(pair, -1) < cb:
            callee_budget[pair] = cb
            changed = True
        if caller_budget.get(pair, -1) < crb:
            caller_budget[pair] = crb
            changed = True
        return changed

    @staticmethod
    def _substituted(site: _Site, bucket: dict[str, int]) -> dict[str, int]:
        """Apply a site's form to every alias; wrapping forms cost one wrap."""
        cost = 0 if site.bare else 1
        out: dict[str, int] = {}
        for alias, wraps in bucket.items():
            new = site.substitute(alias)
            cur = out.get(new)
            if cur is None or wraps + cost < cur:
                out[new] = wraps + cost
        return out

    def _reach(self, reach, name, tier, depth) -> bool:
        cur = reach.get(name)
        if cur is None or (tier, depth) < cur:
            reach[name] = (tier, depth)
            return True
        return False

    def _fixpoint(self, aliases, callee_budget, caller_budget, derived, reach):
        for _ in range(100_000):
            changed = False
            for fname in [f for f, _ in list(aliases)]:
                if fname not in self.graph.nodes:
                    continue
                idx = self.index(fname)
                changed |= self._apply_assigns(fname, idx, aliases, callee_budget,
                                               caller_budget, derived)
                changed |= self._apply_callees(fname, idx, aliases, callee_budget,
                                               caller_budget, derived, reach)
            changed |= self._apply_callers(aliases, callee_budget, caller_budget,
                                           derived, reach)
            if not changed:
                return
        raise RuntimeError("data-flow propagation did not stabilize")

    def _apply_assigns(self, fname, idx, aliases, callee_budget, caller_budget, derived):
        changed = False
        for info in idx.assigns:
            for giver, taker, kind in (
                (info.rhs, info.lhs, TraceRule.AssignRL),
                (info.lhs, info.rhs, TraceRule.AssignLR),
            ):
                if not taker.bare:
                    continue  # cannot solve a compound form for its base
                giver_pair = (fname, giver.base_name)
                if giver_pair not in aliases:
                    continue
                taker_pair = (fname, taker.base_name)
                new = self._substituted(giver, aliases[giver_pair])
                changed |= self._add(aliases, taker_pair, new, kind, derived,
                                     callee_budget, caller_budget,
                                     callee_budget.get(giver_pair, 0),
                                     caller_budget.get(giver_pair, 0))
        return changed

    def _apply_callees(self, fname, idx, aliases, callee_budget, caller_budget,
                       derived, reach):
        changed = False
        for call in idx.calls:
            callee_fn = self.graph.nodes.get(call.callee)
            if callee_fn is None:
                continue
            for pos, sites in enumerate(call.args):
                formal = next((p.name for p in callee_fn.params if p.position == pos), None)
                if formal is None:
                    continue
                for site, shape in sites:
                    pair = (fname, site.base_name)
                    if pair not in aliases or callee_budget.get(pair, 0) <= 0:
                        continue
                    rule = TraceRule.CalleeSimple if shape == "simple" else TraceRule.CalleeExpr
                    new = self._substituted(site, aliases[pair])
                    changed |= self._add(aliases, (call.callee, formal), new, rule,
                                         derived, callee_budget, caller_budget,
                                         callee_budget[pair] - 1, 0)
                    tier, depth = reach[fname]
                    changed |= self._reach(reach, call.callee, 1 if tier == 0 else tier,
                                           depth + 1)
        return changed

    def _apply_callers(self, aliases, callee_budget, caller_budget, derived, reach):
        changed = False
        for (fname, vname) in list(aliases):
            if caller_budget.get((fname, vname), 0) <= 0:
                continue
            fn = self.graph.nodes.get(fname)
            if fn is None:
                continue
            position = next((p.position for p in fn.params if p.name == vname), None)
            if position is None:
                continue
            pair = (fname, vname)
            for caller in self.graph.callers(fname):
                if caller not in self.graph.nodes:
                    continue
                cidx = self.index(caller)
                for call in cidx.calls:
                    if call.callee != fname or position >= len(call.args):
                        continue
                    for site, shape in call.args[position]:
                        if shape != "simple":
                            continue
                        changed |= self._add(aliases, (caller, site.base_name),
                                             dict(aliases[pair]), TraceRule.Caller,
                                             derived, callee_budget, caller_budget,
                                             0, caller_budget[pair] - 1)
                        tier, depth = reach[fname]
                        changed |= self._reach(reach, caller, 2, depth + 1)
        return changed

    # -- usage collection --------------------------------------------------

    def _collect(self, origin, aliases, callee_budget, caller_budget, derived, reach):
        ordered_fns = sorted({f for f, _ in aliases if f in self.graph.nodes},
                             key=lambda f: (reach.get(f, (9, 9)), f))
        out: list[UsageRecord] = []
        for fname in ordered_fns:
            idx = self.index(fname)
            claims = self._claims(fname, idx, aliases, callee_budget, caller_budget)
            records: dict[tuple[int, str], UsageRecord] = {}
            for var, line, offset in idx.occurrences:
                pair = (fname, var)
                if pair not in aliases:
                    continue
                rule = claims.get(offset, TraceRule.Expr)
                records[(offset, var)] = UsageRecord(
                    fname, line, idx.line_text(line), var,
                    ", ".join(sorted(aliases[pair])), rule)
            for (fn2, var), kinds in derived.items():
                if fn2 != fname or var not in idx.decl_at:
                    continue
                if (fn2, var) == origin:
                    rule = TraceRule.Def
                elif TraceRule.CalleeSimple in kinds:
                    rule = TraceRule.CalleeSimple
                elif TraceRule.CalleeExpr in kinds:
                    rule = TraceRule.CalleeExpr
                else:
                    continue
                line, offset = idx.decl_at[var]
                key = (offset, var)
                existing = records.get(key)
                if existing is None or _RULE_RANK[rule] < _RULE_RANK[existing.rule]:
                    records[key] = UsageRecord(
                        fname, line, idx.line_text(line), var,
                        ", ".join(sorted(aliases[(fname, var)])), rule)
            out.extend(records[k] for k in sorted(records))
        return out

    def _claims(self, fname, idx, aliases, callee_budget, caller_budget):
        claims: dict[int, TraceRule] = {}

        def claim(offset: int, rule: TraceRule):
            cur = claims.get(offset)
            if cur is None or _RULE_RANK[rule] < _RULE_RANK[cur]:
                claims[offset] = rule

        for info in idx.assigns:
            if (fname, info.lhs.base_name) in aliases:
                claim(info.lhs.base_start, TraceRule.AssignLR)
            if (fname, info.rhs.base_name) in aliases:
                claim(info.rhs.base_start, TraceRule.AssignRL)
        for call in idx.calls:
            callee_fn = self.graph.nodes.get(call.callee)
            if callee_fn is None:
                continue
            for pos, sites in enumerate(call.args):
                formal = next((p.name for p in callee_fn.params if p.position == pos), None)
                if formal is None:
                    continue
                formal_pair = (call.callee, formal)
                for site, shape in sites:
                    pair = (fname, site.base_name)
                    if pair in aliases and callee_budget.get(pair, 0) > 0:
                        claim(site.base_start,
                              TraceRule.CalleeSimple if shape == "simple"
                              else TraceRule.CalleeExpr)
                    if shape == "simple" and formal_pair in aliases \
                            and caller_budget.get(formal_pair, 0) > 0 \
                            and pair in aliases:
                        claim(site.base_start, TraceRule.Caller)
        return claims


def trace_variable(graph: CallGraph, target: str, var: str,
                   cfg: ContextConfig = ContextConfig()) -> TraceReport:
    """Trace one variable of the target function through the graph."""
    return _Tracer(graph, cfg).trace(target, var)


def trace_all(graph: CallGraph, target: str,
              cfg: ContextConfig = ContextConfig()) -> list[TraceReport]:
    """Trace every parameter and local of the target, in declaration order."""
    fn = graph.function(target)
    tracer = _Tracer(graph, cfg)
    return [tracer.trace(target, v.name) for v in fn.variables()]


def reached_functions(reports: list[TraceReport], target: str) -> set[str]:
    """Functions other than the target touched by any of the traces."""
    names: set[str] = set()
    for report in reports:
        for fn, _ in report.aliases:
            if fn != target:
                names.add(fn)
    return names


def annotate(functions: list[PseudoFunction], report: TraceReport) -> dict[str, str]:
    """Render usage records as trailing line comments on each function's text."""
    return annotate_many(functions, [report])


def annotate_many(functions: Sequence[PseudoFunction],
                  reports: Iterable[TraceReport]) -> dict[str, str]:
    """Inline usage comments from several trace reports at once.

    Matches the single-report rendering of :func:`annotate` line for
    line, merging notes from all reports with deduplication.
    """
    notes_by_fn: dict[str, dict[int, list[str]]] = {}
    for report in reports:
        for rec in report.usages:
            notes = notes_by_fn.setdefault(rec.function, {}).setdefault(rec.line, [])
            note = f"{rec.variable} ~ alias of {rec.alias}"
            if note not in notes:
                notes.append(note)
    out: dict[str, str] = {}
    for fn in functions:
        lines = fn.record.pseudocode.split("\n")
        for line_no, notes in notes_by_fn.get(fn.name, {}).items():
            if 1 <= line_no <= len(lines):
                lines[line_no - 1] += "  // " + ", ".join(notes)
        out[fn.name] = "\n".join(lines)
    return out
