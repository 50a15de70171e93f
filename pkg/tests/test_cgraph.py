"""Call-graph scoring and context-selection behavior.

The twelve-candidate fixture's scores, chains, ranking, and emission
order were derived by hand from the documented rules before this module
was written; the literal values below are that derivation.
"""
from __future__ import annotations

import random

import pytest

from binsight.cgraph import (
    CallGraph,
    ChainDirection,
    ContextConfig,
    UnknownFunction,
    collect_context,
    informative_score,
    select_context,
)
from fixturelib import random_dump, twelve_candidate_dump


@pytest.fixture(scope="module")
def graph() -> CallGraph:
    return CallGraph(twelve_candidate_dump())


# Hand-computed: name indicator + min(1, 25*strings/lines) + named-callee fraction.
HAND_SCORES = {
    "target_fn": 1 + 1 + 5 / 7,      # 2 strings in 14 lines clamps; 5 of 7 callees named
    "parse_header": 1 + 1 + 1 / 2,   # checksum named, sub_AAAA placeholder
    "sub_2222": 0 + 0 + 1 / 1,       # placeholder name, no strings, one named callee
    "log_error": 1 + 25 * 1 / 50,    # density term below the clamp; no callees
    "sub_4444": 0 + 1 + 0,           # 25*1/20 = 1.25 clamps to 1
    "aes_expand_key": 1 + 0 + 1 / 1,
    "xor_block": 1 + 0,              # calls nothing: callee term contributes zero
    "main": 1 + 1 + 1 / 1,
    "dispatch": 1 + 0 + 1 / 2,       # sub_4444 placeholder, target_fn named
    "sub_AAAA": 0 + 1 + 0,           # 25*2/8 clamps
}


class TestInformativeScore:
    @pytest.mark.parametrize("name,expected", sorted(HAND_SCORES.items()))
    def test_hand_scored(self, graph, name, expected):
        got = informative_score(graph.function(name), graph)
        assert got == pytest.approx(expected, abs=1e-9)

    def test_range(self, graph):
        for name in graph.nodes:
            assert 0.0 <= informative_score(graph.function(name), graph) <= 3.0

    def test_beta_controls_density(self, graph):
        fn = graph.function("log_error")  # 1 string / 50 lines
        assert informative_score(fn, graph, beta=50.0) == pytest.approx(2.0, abs=1e-9)


DEEP = ContextConfig(depth_callee=2, depth_caller=2, k=10)

FORWARD_CHAINS = [
    ("target_fn", "aes_expand_key"),
    ("target_fn", "log_error"),
    ("target_fn", "parse_header", "checksum"),
    ("target_fn", "parse_header", "sub_AAAA"),
    ("target_fn", "puts"),
    ("target_fn", "sub_2222"),
    ("target_fn", "sub_4444"),
    ("target_fn", "xor_block"),
]
BACKWARD_CHAINS = [
    ("target_fn", "dispatch"),
    ("target_fn", "main", "start_routine"),
    ("target_fn", "sub_2222"),
    ("target_fn", "sub_8888"),
]

RANK_ORDER = [
    "xor_block",       # data-flow priority beats every score
    "main",            # 3.0
    "parse_header",    # 2.5
    "aes_expand_key",  # 2.0 depth 1
    "checksum",        # 2.0 depth 2, name before start_routine
    "start_routine",   # 2.0 depth 2
    "dispatch",        # 1.5, name before log_error
    "log_error",       # 1.5
    "sub_2222",        # 1.0
    "sub_4444",        # 1.0
    "sub_8888",        # 1.0
    "sub_AAAA",        # 1.0 depth 2
]

EMISSION = [
    "checksum", "start_routine",                       # depth 2, rank order
    "xor_block", "main", "parse_header", "aes_expand_key",
    "dispatch", "log_error", "sub_2222", "sub_4444",   # depth 1, rank order
]


class TestTwelveCandidateFixture:
    def test_candidate_set_and_depths(self, graph):
        sel = collect_context(graph, "target_fn", DEEP)
        got = {(c.name, c.depth) for c in sel.candidates}
        assert got == {
            ("aes_expand_key", 1), ("log_error", 1), ("parse_header", 1),
            ("sub_2222", 1), ("sub_4444", 1), ("xor_block", 1),
            ("dispatch", 1), ("main", 1), ("sub_8888", 1),
            ("checksum", 2), ("sub_AAAA", 2), ("start_routine", 2),
        }

    def test_candidates_sorted_depth_then_name(self, graph):
        sel = collect_context(graph, "target_fn", DEEP)
        keys = [(c.depth, c.name) for c in sel.candidates]
        assert keys == sorted(keys)

    def test_externals_reachable_but_never_candidates(self, graph):
        sel = collect_context(graph, "target_fn", DEEP)
        names = {c.name for c in sel.candidates}
        assert "puts" not in names and "crc32_combine" not in names
        chain_nodes = {n for c in sel.chains for n in c.nodes}
        assert "puts" in chain_nodes

    def test_externals_terminate_chains(self, graph):
        # checksum calls the external crc32_combine, which must not extend
        # the chain even at depth 2.
        sel = collect_context(graph, "target_fn", DEEP)
        for chain in sel.chains:
            assert "crc32_combine" not in chain.nodes

    def test_forward_chains(self, graph):
        sel = collect_context(graph, "target_fn", DEEP)
        fwd = [c.nodes for c in sel.chains if c.direction is ChainDirection.Forward]
        assert fwd == [tuple(c) for c in FORWARD_CHAINS]

    def test_backward_chains(self, graph):
        sel = collect_context(graph, "target_fn", DEEP)
        bwd = [c.nodes for c in sel.chains if c.direction is ChainDirection.Backward]
        assert bwd == [tuple(c) for c in BACKWARD_CHAINS]

    def test_rank_order_and_truncation(self, graph):
        sel = collect_context(graph, "target_fn", DEEP)
        ranked = select_context(sel, DEEP, traced={"xor_block"})
        # emission holds the top 10 of the 12: the two lowest-ranked drop.
        assert set(ranked.selected) == set(RANK_ORDER[:10])
        assert "sub_8888" not in ranked.selected
        assert "sub_AAAA" not in ranked.selected

    def test_full_rank_order_via_large_k(self, graph):
        sel = collect_context(graph, "target_fn", DEEP)
        cfg = ContextConfig(depth_callee=2, depth_caller=2, k=100)
        ranked = select_context(sel, cfg, traced={"xor_block"})
        by_rank = sorted(
            ranked.candidates,
            key=lambda c: (-int(c.dataflow_priority), -c.score, c.depth, c.name),
        )
        assert [c.name for c in by_rank] == RANK_ORDER

    def test_emission_order_exact(self, graph):
        sel = collect_context(graph, "target_fn", DEEP)
        ranked = select_context(sel, DEEP, traced={"xor_block"})
        assert ranked.selected == EMISSION

    def test_default_depth_excludes_two_hop(self, graph):
        sel = collect_context(graph, "target_fn", ContextConfig())
        names = {c.name for c in sel.candidates}
        assert "checksum" not in names and "start_routine" not in names
        assert "parse_header" in names and "main" in names

    def test_min_depth_merge_for_shared_neighbor(self, graph):
        # sub_2222 is both a callee and a caller of the target; it must
        # appear once, at depth 1.
        sel = collect_context(graph, "target_fn", DEEP)
        entries = [c for c in sel.candidates if c.name == "sub_2222"]
        assert len(entries) == 1 and entries[0].depth == 1

    def test_unknown_target(self, graph):
        with pytest.raises(UnknownFunction):
            collect_context(graph, "no_such_fn", DEEP)

    def test_external_target_rejected(self, graph):
        with pytest.raises(UnknownFunction):
            collect_context(graph, "puts", DEEP)

    def test_to_json_shape(self, graph):
        sel = select_context(collect_context(graph, "target_fn", DEEP), DEEP)
        doc = sel.to_json()
        assert doc["target"] == "target_fn"
        assert len(doc["candidates"]) == 12
        assert doc["selected"]
        assert {"direction", "nodes"} <= set(doc["chains"][0])


class TestRandomizedSelection:
    """Invariants over randomly generated graphs."""

    @pytest.mark.parametrize("seed", range(100))
    def test_invariants(self, seed):
        rng = random.Random(seed)
        dump = random_dump(rng)
        graph = CallGraph(dump)
        internal = sorted(graph.nodes)
        target = rng.choice(internal)
        cfg = ContextConfig(
            depth_callee=rng.randrange(0, 4),
            depth_caller=rng.randrange(0, 4),
            k=rng.randrange(1, 8),
        )
        traced = set(rng.sample(internal, min(2, len(internal))))
        sel = select_context(collect_context(graph, target, cfg), cfg, traced=traced)

        assert len(sel.selected) <= cfg.k
        assert target not in sel.selected
        assert all(graph.is_internal(n) for n in sel.selected)

        depth_of = {c.name: c.depth for c in sel.candidates}
        depths = [depth_of[n] for n in sel.selected]
        assert depths == sorted(depths, reverse=True)

        for c in sel.candidates:
            assert 0.0 <= c.score <= 3.0
            assert c.depth >= 1

    @pytest.mark.parametrize("seed", [7, 21, 63])
    def test_deterministic_across_rebuilds(self, seed):
        def run():
            rng = random.Random(seed)
            dump = random_dump(rng)
            graph = CallGraph(dump)
            target = sorted(graph.nodes)[0]
            cfg = ContextConfig(depth_callee=2, depth_caller=2, k=5)
            sel = select_context(collect_context(graph, target, cfg), cfg)
            return sel.to_json()

        assert run() == run()
