import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seedex.errors import FormatError, ReferentialIntegrityError
from seedex.graph import TypedGraph, escape_field, induced_subgraph, load_graph, neighbors, save_graph, unescape_field
from seedex.theory.tracing import gen_relation_tracing

from conftest import make_graph


def write_graph(tmp_path, nodes, edges):
    (tmp_path / "nodes.tsv").write_text("".join(f"{a}\t{b}\t{c}\n" for a, b, c in nodes), encoding="utf-8")
    (tmp_path / "edges.tsv").write_text("".join(f"{a}\t{b}\t{c}\n" for a, b, c in edges), encoding="utf-8")
    return tmp_path / "nodes.tsv", tmp_path / "edges.tsv"


def test_load_three_node_chain(tmp_path):
    n, e = write_graph(tmp_path, [("a", "t", "x"), ("b", "t", "y"), ("c", "t", "z")],
                       [("a", "r0", "b"), ("b", "r0", "c")])
    g = load_graph(n, e)
    assert g.num_nodes == 3 and g.num_edges == 2
    assert g.out_degree().tolist() == [1, 1, 0]
    assert g.in_degree().tolist() == [0, 1, 1]


def test_load_empty_edge_file(tmp_path):
    n, e = write_graph(tmp_path, [("a", "t", "x"), ("b", "t", "y")], [])
    g = load_graph(n, e)
    assert g.num_edges == 0
    assert all(neighbors(g, v, "both") == [] for v in range(g.num_nodes))


def test_unknown_endpoint_is_referential_error(tmp_path):
    n, e = write_graph(tmp_path, [("0", "t", "x"), ("1", "t", "y"), ("2", "t", "z")], [("0", "r0", "99")])
    with pytest.raises(ReferentialIntegrityError, match="99"):
        load_graph(n, e)


def test_direct_construction_rejects_out_of_range():
    with pytest.raises(ReferentialIntegrityError):
        make_graph(3, [(0, 0, 99)])
    with pytest.raises(ReferentialIntegrityError):
        make_graph(3, [(0, 5, 1)])


def test_wrong_field_count_is_format_error(tmp_path):
    (tmp_path / "nodes.tsv").write_text("a\tt\n", encoding="utf-8")
    (tmp_path / "edges.tsv").write_text("", encoding="utf-8")
    with pytest.raises(FormatError, match="nodes.tsv:1"):
        load_graph(tmp_path / "nodes.tsv", tmp_path / "edges.tsv")


def test_duplicate_edges_preserved_unless_dedup(tmp_path):
    n, e = write_graph(tmp_path, [("a", "t", "x"), ("b", "t", "y")], [("a", "r", "b"), ("a", "r", "b")])
    assert load_graph(n, e).num_edges == 2
    assert load_graph(n, e, dedup=True).num_edges == 1


def test_escaped_text_round_trip(tmp_path):
    text = "tab\there\nnew line \\ backslash"
    assert unescape_field(escape_field(text)) == text
    g = TypedGraph(["t"], ["r"], [0, 0], [text, "plain"], [(0, 0, 1)], ["x", "y"])
    save_graph(g, tmp_path)
    g2 = load_graph(tmp_path / "nodes.tsv", tmp_path / "edges.tsv")
    assert g2.texts == g.texts and g2.edges == g.edges
    assert json.loads((tmp_path / "manifest.json").read_text())["relations"] == ["r"]


def test_manifest_fixes_vocabulary_order(tmp_path):
    n, e = write_graph(tmp_path, [("a", "t2", "x"), ("b", "t1", "y")], [("a", "r1", "b")])
    (tmp_path / "manifest.json").write_text(json.dumps({"node_types": ["t1", "t2"], "relations": ["r0", "r1"]}))
    g = load_graph(n, e)
    assert g.node_types == ("t1", "t2") and g.type_ids.tolist() == [1, 0]
    assert g.rel.tolist() == [1]


def test_star_and_isolated():
    g = make_graph(6, [(0, 0, i) for i in range(1, 5)])
    assert len(neighbors(g, 0)) == 4
    assert neighbors(g, 5) == [] and neighbors(g, 5, "in") == []
    assert neighbors(g, 1, "in") == [(0, 0)]
    with pytest.raises(IndexError):
        neighbors(g, 6)


def test_relation_tracing_degrees():
    rt = gen_relation_tracing(64, 3, rng_seed=0)
    g = rt.graph
    assert (g.out_degree() == 3).all() and (g.in_degree() == 3).all()


def test_induced_subgraph_cases():
    g = make_graph(3, [(0, 0, 1), (1, 0, 2)])
    assert sorted(induced_subgraph(g, range(3)).edges) == sorted(g.edges)
    assert induced_subgraph(g, [1]).edges == []
    assert induced_subgraph(g, [0, 2]).edges == []
    with pytest.raises(IndexError):
        induced_subgraph(g, [0, 7])


def test_subgraph_local_edges():
    g = make_graph(4, [(0, 0, 1), (1, 0, 3), (3, 0, 2)])
    view = induced_subgraph(g, [3, 1, 0])
    assert view.members.tolist() == [3, 1, 0]     # insertion order defines local ids
    src, rel, dst = view.local_edges()
    glob = sorted(zip(view.members[src].tolist(), view.members[dst].tolist()))
    assert glob == [(0, 1), (1, 3)]


edge_lists = st.integers(2, 12).flatmap(lambda n: st.tuples(
    st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, 2), st.integers(0, n - 1)), max_size=40)))


@settings(max_examples=60, deadline=None)
@given(edge_lists)
def test_adjacency_is_bijection_with_edges(data):
    n, edges = data
    g = make_graph(n, edges, relations=("a", "b", "c"))
    out = sorted((v, r, u) for v in range(n) for r, u in neighbors(g, v, "out"))
    inc = sorted((u, r, v) for v in range(n) for r, u in neighbors(g, v, "in"))
    assert out == sorted(edges) == inc


@settings(max_examples=40, deadline=None)
@given(edge_lists, st.data())
def test_induced_subgraph_matches_filter(data, draw):
    n, edges = data
    g = make_graph(n, edges, relations=("a", "b", "c"))
    members = draw.draw(st.sets(st.integers(0, n - 1), min_size=1))
    want = sorted(e for e in edges if e[0] in members and e[2] in members)
    assert sorted(induced_subgraph(g, members).edges) == want
