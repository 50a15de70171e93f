"""Call-graph construction, informative scoring, and context selection.

A target function's context is chosen by breadth-first traversal over
callees and callers with per-direction depth limits, scoring every
reached function for information richness, and keeping the top k with
the deepest functions emitted first (nearest the target last).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

from .pseudoc import DecompDump, ParseFailure, PseudoFunction, is_placeholder_name, parse_pseudocode


class UnknownFunction(Exception):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown function {name!r}")


@dataclass(frozen=True)
class ContextConfig:
    depth_callee: int = 1
    depth_caller: int = 1
    k: int = 10
    beta: float = 25.0


class ChainDirection(str, Enum):
    Forward = "forward"    # toward callees
    Backward = "backward"  # toward callers


@dataclass(frozen=True)
class CallChain:
    direction: ChainDirection
    nodes: tuple[str, ...]  # target first, extending outward


@dataclass(frozen=True)
class Candidate:
    name: str
    depth: int
    score: float
    dataflow_priority: bool = False


@dataclass
class ContextSelection:
    target: str
    chains: list[CallChain]
    candidates: list[Candidate]
    selected: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "target": self.target,
            "chains": [
                {"direction": c.direction.value, "nodes": list(c.nodes)}
                for c in self.chains
            ],
            "candidates": [
                {"name": c.name, "depth": c.depth, "score": c.score,
                 "dataflow_priority": c.dataflow_priority}
                for c in self.candidates
            ],
            "selected": list(self.selected),
        }


class CallGraph:
    """Directed caller/callee graph over one decompilation dump.

    Nodes are parsed internal functions; names that only appear as call
    targets (library imports, explicit external records, functions whose
    pseudocode failed to parse) terminate traversal.
    """

    def __init__(self, dump: DecompDump):
        self.dump = dump
        self.nodes: dict[str, PseudoFunction] = {}
        self.forward: dict[str, set[str]] = {}
        self.backward: dict[str, set[str]] = {}
        self.externals: set[str] = {r.name for r in dump.records if r.external}
        self.failures: dict[str, ParseFailure] = {}
        for rec in dump.internal():
            if rec.name in self.nodes:
                continue
            try:
                self.nodes[rec.name] = parse_pseudocode(rec)
            except ParseFailure as exc:
                self.failures[rec.name] = exc
        for name, fn in self.nodes.items():
            for site in fn.call_sites:
                callee = site.callee_name
                self.forward.setdefault(name, set()).add(callee)
                self.backward.setdefault(callee, set()).add(name)
                if callee not in self.nodes:
                    self.externals.add(callee)

    def is_internal(self, name: str) -> bool:
        return name in self.nodes

    def callees(self, name: str) -> list[str]:
        return sorted(self.forward.get(name, ()))

    def callers(self, name: str) -> list[str]:
        return sorted(self.backward.get(name, ()))

    def function(self, name: str) -> PseudoFunction:
        try:
            return self.nodes[name]
        except KeyError:
            raise UnknownFunction(name) from None


def build_call_graph(dump: DecompDump) -> CallGraph:
    return CallGraph(dump)


def name_indicator(name: str) -> int:
    """1 when the function carries a real symbol, 0 for stripped placeholders."""
    return 0 if is_placeholder_name(name) else 1


def informative_score(fn: PseudoFunction, graph: CallGraph, beta: float = 25.0) -> float:
    """Information richness of a function, in [0, 3].

    Sum of: name presence, clamped string density beta*strings/lines,
    and the fraction of distinct callees carrying real names (0 when the
    function calls nothing).
    """
    score = float(name_indicator(fn.name))
    if fn.line_count > 0:
        score += min(1.0, beta * len(fn.string_literals) / fn.line_count)
    callees = graph.callees(fn.name)
    if callees:
        score += sum(name_indicator(c) for c in callees) / len(callees)
    return score


def _bfs(graph: CallGraph, target: str, direction: ChainDirection,
         limit: int) -> tuple[list[CallChain], dict[str, int]]:
    edges = graph.forward if direction is ChainDirection.Forward else graph.backward
    visited = {target}
    depth = {target: 0}
    parent: dict[str, str] = {}
    expanded: dict[str, list[str]] = {}
    queue = deque([target])
    while queue:
        cur = queue.popleft()
        if depth[cur] >= limit:
            continue
        if cur != target and not graph.is_internal(cur):
            continue  # externals terminate chains
        for nxt in sorted(edges.get(cur, ())):
            if nxt in visited:
                continue
            visited.add(nxt)
            depth[nxt] = depth[cur] + 1
            parent[nxt] = cur
            expanded.setdefault(cur, []).append(nxt)
            queue.append(nxt)
    chains = []
    for node in visited:
        if node == target or expanded.get(node):
            continue
        path = [node]
        while path[-1] != target:
            path.append(parent[path[-1]])
        path.reverse()
        chains.append(CallChain(direction, tuple(path)))
    chains.sort(key=lambda c: c.nodes)
    depths = {n: d for n, d in depth.items() if n != target}
    return chains, depths


def collect_context(graph: CallGraph, target: str, cfg: ContextConfig) -> ContextSelection:
    """Reach context functions by BFS in both directions; no ranking yet."""
    if not graph.is_internal(target):
        raise UnknownFunction(target)
    fwd_chains, fwd_depths = _bfs(graph, target, ChainDirection.Forward, cfg.depth_callee)
    bwd_chains, bwd_depths = _bfs(graph, target, ChainDirection.Backward, cfg.depth_caller)
    merged: dict[str, int] = dict(fwd_depths)
    for name, d in bwd_depths.items():
        merged[name] = min(merged.get(name, d), d)
    candidates = [
        Candidate(name, d, informative_score(graph.nodes[name], graph, cfg.beta))
        for name, d in merged.items() if graph.is_internal(name)
    ]
    candidates.sort(key=lambda c: (c.depth, c.name))
    return ContextSelection(target, fwd_chains + bwd_chains, candidates)


def select_context(sel: ContextSelection, cfg: ContextConfig,
                   traced: set[str] = frozenset()) -> ContextSelection:
    """Rank candidates and fill the selected emission order.

    Rank: data-flow-reached functions first, then score descending,
    depth ascending, name ascending. The top k are then emitted deepest
    first so functions nearest the target sit at the end.
    """
    flagged = [replace(c, dataflow_priority=c.name in traced) for c in sel.candidates]
    ranked = sorted(flagged, key=lambda c: (-int(c.dataflow_priority), -c.score, c.depth, c.name))
    top = ranked[:max(cfg.k, 0)]
    emission = sorted(top, key=lambda c: -c.depth)  # stable: rank order within a depth
    return ContextSelection(sel.target, sel.chains, flagged, [c.name for c in emission])
