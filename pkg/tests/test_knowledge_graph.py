import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgprop.errors import IndexOutOfRange, InvalidConfig, UnknownConcept, UnmappedLabel, ValidationError
from kgprop.knowledge_graph import (
    Edge,
    EdgeKind,
    GraphBuildConfig,
    Taxonomy,
    TypedGraph,
    adjacency_blocks,
    build_typed_graph,
    depth,
    wup_similarity,
)
from kgprop.semantic_space import LabelVocabulary
from oracles import brute_wup, parents_map, random_taxonomy_edges

CHAIN = Taxonomy([("a", "root"), ("b", "a")])
DIAMOND = Taxonomy([("a", "root"), ("b", "root"), ("c", "a"), ("c", "b")])
SIBLINGS = Taxonomy([("p", "root"), ("x", "p"), ("y", "p")])


class TestDepth:
    def test_root(self):
        assert depth(CHAIN, "root") == 1

    def test_chain(self):
        assert depth(CHAIN, "b") == 3

    def test_diamond(self):
        assert depth(DIAMOND, "c") == 3

    def test_shortest_path_wins(self):
        tax = Taxonomy([("a", "r"), ("b", "a"), ("c", "b"), ("c", "r")])
        assert depth(tax, "c") == 2

    def test_unknown(self):
        with pytest.raises(UnknownConcept):
            depth(CHAIN, "zzz")


class TestWup:
    def test_self_similarity(self):
        for node in ("root", "a", "b"):
            assert wup_similarity(CHAIN, node, node) == 1.0

    def test_chain_value(self):
        assert wup_similarity(CHAIN, "a", "b") == pytest.approx(0.8)

    def test_disjoint_trees(self):
        tax = Taxonomy([("a", "r1"), ("b", "r2")])
        assert wup_similarity(tax, "a", "b") is None

    def test_unknown(self):
        with pytest.raises(UnknownConcept):
            wup_similarity(CHAIN, "a", "nope")

    def test_shortcut_edge_capped_at_one(self):
        # c hangs off the root directly and via a chain, so its ancestor b
        # (depth 3) is deeper than c itself (depth 2)
        tax = Taxonomy([("a", "r"), ("b", "a"), ("c", "b"), ("c", "r")])
        assert wup_similarity(tax, "c", "c") == 1.0
        assert wup_similarity(tax, "b", "c") == 1.0

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 18))
    def test_matches_path_enumeration(self, seed, n):
        rng = np.random.default_rng(seed)
        edges, nodes = random_taxonomy_edges(rng, n)
        tax = Taxonomy(edges, nodes)
        parents = parents_map(edges, nodes)
        for u in nodes:
            for v in nodes:
                got = wup_similarity(tax, u, v)
                assert got == brute_wup(parents, u, v)
                assert got == wup_similarity(tax, v, u)
                if got is not None:
                    assert 0.0 < got <= 1.0


class TestTaxonomy:
    def test_cycle_rejected(self):
        with pytest.raises(ValidationError):
            Taxonomy([("a", "b"), ("b", "c"), ("c", "a")])

    def test_roots(self):
        assert DIAMOND.roots == ["root"]

    def test_file_round_trip(self, tmp_path):
        tax = Taxonomy([("a", "root"), ("b", "a")], nodes=["lonely"])
        tax.save(tmp_path / "t.tsv")
        back = Taxonomy.load(tmp_path / "t.tsv")
        assert back.isa_edges == tax.isa_edges and back.nodes == tax.nodes


class TestBuildTypedGraph:
    def test_super_subordinate_overrides_similarity(self):
        tax = Taxonomy([("bird", "animal"), ("eagle", "bird"), ("animal", "entity")])
        vocab = LabelVocabulary.from_split(["animal", "eagle"])
        g = build_typed_graph(tax, vocab, None, GraphBuildConfig(theta_pos=0.1, theta_neg=0.05))
        assert g.edges == (Edge(0, 1, EdgeKind.SUPER_SUB),)

    def test_ancestor_listed_second_in_vocab(self):
        tax = Taxonomy([("eagle", "animal")])
        g = build_typed_graph(tax, LabelVocabulary.from_split(["eagle", "animal"]))
        assert g.edges == (Edge(1, 0, EdgeKind.SUPER_SUB),)

    def test_siblings_between_thresholds(self):
        g = build_typed_graph(SIBLINGS, LabelVocabulary.from_split(["x", "y"]))
        assert g.edges == ()

    def test_siblings_relaxed_threshold(self):
        g = build_typed_graph(SIBLINGS, LabelVocabulary.from_split(["x", "y"]), None,
                              GraphBuildConfig(theta_pos=0.6, theta_neg=0.3))
        assert g.edges == (Edge(0, 1, EdgeKind.POSITIVE),)

    def test_negative_edge(self):
        tax = Taxonomy([("a", "r"), ("a1", "a"), ("a2", "a1"), ("b", "r"), ("b1", "b"), ("b2", "b1")])
        # wup(a2, b2) = 2*1/(4+4) = 0.25
        g = build_typed_graph(tax, LabelVocabulary.from_split(["a2", "b2"]))
        assert g.edges == (Edge(0, 1, EdgeKind.NEGATIVE),)

    def test_no_similarity_no_edge(self):
        tax = Taxonomy([("a", "r1"), ("b", "r2")])
        g = build_typed_graph(tax, LabelVocabulary.from_split(["a", "b"]), None,
                              GraphBuildConfig(theta_pos=0.9, theta_neg=0.5))
        assert g.edges == ()

    def test_mapping(self):
        g = build_typed_graph(SIBLINGS, LabelVocabulary.from_split(["left", "right"]),
                              {"left": "x", "right": "y"}, GraphBuildConfig(0.6, 0.3))
        assert g.count(EdgeKind.POSITIVE) == 1

    def test_unmapped(self):
        with pytest.raises(UnmappedLabel):
            build_typed_graph(SIBLINGS, LabelVocabulary.from_split(["x", "dragon"]))

    @pytest.mark.parametrize("pos,neg", [(0.3, 0.3), (0.0, 0.0), (1.2, 0.1), (0.8, -0.1)])
    def test_invalid_config(self, pos, neg):
        with pytest.raises(InvalidConfig):
            GraphBuildConfig(pos, neg)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_structure_and_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        edges, nodes = random_taxonomy_edges(rng, 15)
        tax = Taxonomy(edges, nodes)
        labels = [nodes[i] for i in sorted(rng.choice(15, size=8, replace=False))]
        vocab = LabelVocabulary.from_split(labels)
        lo, hi = sorted(rng.uniform(0.05, 0.95, size=2))
        base = build_typed_graph(tax, vocab, None, GraphBuildConfig(hi, lo))
        pairs = [tuple(sorted((e.u, e.v))) for e in base.edges]
        assert len(pairs) == len(set(pairs))
        for e in base.edges:
            a, b = vocab.labels[e.u], vocab.labels[e.v]
            related = tax.is_ancestor(a, b) or tax.is_ancestor(b, a)
            assert (e.kind is EdgeKind.SUPER_SUB) == related
            if e.kind is EdgeKind.SUPER_SUB:
                assert tax.is_ancestor(a, b)
        pos = {(e.u, e.v) for e in base.edges if e.kind is EdgeKind.POSITIVE}
        neg = {(e.u, e.v) for e in base.edges if e.kind is EdgeKind.NEGATIVE}
        stricter = build_typed_graph(tax, vocab, None, GraphBuildConfig(min(1.0, hi + 0.03), max(0.0, lo - 0.03)))
        assert {(e.u, e.v) for e in stricter.edges if e.kind is EdgeKind.POSITIVE} <= pos
        assert {(e.u, e.v) for e in stricter.edges if e.kind is EdgeKind.NEGATIVE} <= neg


class TestTypedGraph:
    def test_adjacency_single_edge(self):
        g = TypedGraph(2, [Edge(0, 1, EdgeKind.POSITIVE)])
        assert adjacency_blocks(g, 0) == [(1, EdgeKind.POSITIVE)]

    def test_isolated_node(self):
        g = TypedGraph(3, [Edge(0, 1, EdgeKind.POSITIVE)])
        assert adjacency_blocks(g, 2) == []

    def test_super_sub_visible_from_both_ends(self):
        g = TypedGraph(2, [Edge(0, 1, EdgeKind.SUPER_SUB)])
        assert adjacency_blocks(g, 1) == [(0, EdgeKind.SUPER_SUB)]
        assert adjacency_blocks(g, 0) == [(1, EdgeKind.SUPER_SUB)]

    def test_adjacency_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            adjacency_blocks(TypedGraph(2), 2)

    def test_undirected_edges_normalised(self):
        g = TypedGraph(3, [Edge(2, 0, EdgeKind.NEGATIVE)])
        assert g.edges == (Edge(0, 2, EdgeKind.NEGATIVE),)

    def test_super_sub_keeps_direction(self):
        g = TypedGraph(3, [Edge(2, 0, EdgeKind.SUPER_SUB)])
        assert g.edges == (Edge(2, 0, EdgeKind.SUPER_SUB),)

    @pytest.mark.parametrize("edges", [
        [Edge(1, 1, EdgeKind.POSITIVE)],
        [Edge(0, 1, EdgeKind.POSITIVE), Edge(1, 0, EdgeKind.SUPER_SUB)],
    ])
    def test_invalid_edges(self, edges):
        with pytest.raises(ValidationError):
            TypedGraph(2, edges)

    def test_json_round_trip(self, tmp_path):
        g = TypedGraph(4, [Edge(0, 1, EdgeKind.SUPER_SUB), Edge(1, 2, EdgeKind.POSITIVE), Edge(0, 3, EdgeKind.NEGATIVE)])
        g.save(tmp_path / "g.json")
        doc = json.loads((tmp_path / "g.json").read_text())
        assert doc["node_count"] == 4
        assert {e["kind"] for e in doc["edges"]} == {"super_sub", "positive", "negative"}
        assert TypedGraph.load(tmp_path / "g.json") == g

    def test_subgraph(self):
        g = TypedGraph(3, [Edge(0, 1, EdgeKind.POSITIVE), Edge(1, 2, EdgeKind.POSITIVE)])
        assert g.subgraph(2).edges == (Edge(0, 1, EdgeKind.POSITIVE),)
