import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opengda.graph import (
    CsrAdjacency,
    GraphFormatError,
    LabeledGraph,
    load_edge_list,
    load_features,
    load_graph,
    load_labels,
    load_pair,
    relabel_openset,
    split_source,
    write_edge_list,
    write_features,
    write_graph,
)

edge_lists = st.integers(2, 12).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=30))
)


def graph_with_labels(labels, classes):
    n = len(labels)
    return LabeledGraph(CsrAdjacency.from_edges(n, []), np.ones((n, 2)), np.asarray(labels), classes)


def test_single_edge_normalization(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("0 1\n")
    adj = load_edge_list(p, 2)
    np.testing.assert_array_equal(adj.to_dense(), np.ones((2, 2)))
    assert np.all(adj.norm_val == 0.5)


def test_empty_file_single_node(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("")
    adj = load_edge_list(p, 1)
    assert adj.n == 1 and list(adj.norm_val) == [1.0]


def test_duplicate_lines_deduplicated(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    a.write_text("0 1\n0 1\n1 0\n")
    b.write_text("0 1\n")
    x, y = load_edge_list(a, 2), load_edge_list(b, 2)
    assert x.same_structure(y) and np.array_equal(x.norm_val, y.norm_val)


def test_edge_list_errors_name_line(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("# comment\n0 1\n0 x\n")
    with pytest.raises(GraphFormatError, match=":3:"):
        load_edge_list(p, 3)
    p.write_text("0 5\n")
    with pytest.raises(GraphFormatError):
        load_edge_list(p, 3)


def test_header_gives_node_count(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("# n=6\n0 1\n")
    assert load_edge_list(p).n == 6


@given(edge_lists)
@settings(max_examples=60, deadline=None)
def test_normalization_coefficients(data):
    n, edges = data
    adj = CsrAdjacency.from_edges(n, edges)
    dense = adj.to_dense()
    assert np.array_equal(dense, dense.T)
    assert np.all(np.diag(dense) == 1)
    d = dense.sum(axis=1)
    rows = adj.row_ids()
    np.testing.assert_array_equal(adj.norm_val, 1.0 / np.sqrt(d[rows] * d[adj.col_idx]))


@pytest.mark.parametrize("k", [2, 3, 4])
def test_regular_graph_coefficients(k):
    # circulant k-regular graph on 10 nodes (k even) or a perfect-matching union for odd k
    n = 10
    if k % 2 == 0:
        edges = [(i, (i + j) % n) for i in range(n) for j in range(1, k // 2 + 1)]
    else:
        edges = [(i, (i + j) % n) for i in range(n) for j in range(1, k // 2 + 1)] + [(i, i + n // 2) for i in range(n // 2)]
    adj = CsrAdjacency.from_edges(n, edges)
    assert np.all(adj.degrees() == k + 1)
    np.testing.assert_allclose(adj.norm_val, 1.0 / (k + 1), rtol=1e-15)
    np.testing.assert_allclose(adj.operator() @ np.ones(n), np.ones(n), rtol=1e-14)


@given(edge_lists)
@settings(max_examples=30, deadline=None)
def test_edge_list_round_trip(tmp_path_factory, data):
    n, edges = data
    adj = CsrAdjacency.from_edges(n, edges)
    p = tmp_path_factory.mktemp("rt") / "e.txt"
    write_edge_list(p, adj)
    back = load_edge_list(p)
    assert back.same_structure(adj) and np.array_equal(back.norm_val, adj.norm_val)


def test_feature_formats(tmp_path):
    x = np.random.default_rng(0).normal(size=(4, 3))
    p = tmp_path / "f.txt"
    write_features(p, x)
    np.testing.assert_array_equal(load_features(p), x)
    s = tmp_path / "s.txt"
    s.write_text("3 4 2\n0 1 2.5\n2 3 -1\n")
    expected = np.zeros((3, 4))
    expected[0, 1], expected[2, 3] = 2.5, -1
    np.testing.assert_array_equal(load_features(s), expected)
    s.write_text("3 4 2 9\n")
    with pytest.raises(GraphFormatError):
        load_features(s)


def test_labels_unlabeled_marker(tmp_path):
    p = tmp_path / "l.txt"
    p.write_text("0\n-1\n2\n")
    np.testing.assert_array_equal(load_labels(p), [0, -1, 2])


def test_relabel_five_classes():
    g = relabel_openset(graph_with_labels([0, 1, 2, 3, 4], 5), {0, 1, 2})
    np.testing.assert_array_equal(g.labels, [0, 1, 2, 3, 3])


def test_relabel_all_known_is_identity():
    g = relabel_openset(graph_with_labels([0, 1, 2, 1], 3), {0, 1, 2})
    np.testing.assert_array_equal(g.labels, [0, 1, 2, 1])


def test_relabel_single_known_class():
    g = relabel_openset(graph_with_labels([2, 0], 3), {2})
    np.testing.assert_array_equal(g.labels, [0, 1])


@given(st.lists(st.integers(0, 6), min_size=1, max_size=40), st.sets(st.integers(0, 6), min_size=1))
def test_relabel_is_total(labels, known):
    g = relabel_openset(graph_with_labels(labels, 7), known)
    assert g.labels.min() >= 0 and g.labels.max() <= len(known)


def test_split_single_class_hundred():
    s = split_source(graph_with_labels([0] * 100, 1), 1, 0)
    assert (len(s.train), len(s.valid), len(s.sanity)) == (70, 10, 20)


def test_split_ten_node_class():
    s = split_source(graph_with_labels([0] * 10, 1), 1, 0)
    assert (len(s.train), len(s.valid), len(s.sanity)) == (7, 1, 2)


def test_split_deterministic_and_disjoint():
    g = graph_with_labels(np.arange(57) % 3, 3)
    a, b = split_source(g, 3, 5), split_source(g, 3, 5)
    for x, y in zip((a.train, a.valid, a.sanity), (b.train, b.valid, b.sanity)):
        assert np.array_equal(x, y)
    allidx = np.concatenate([a.train, a.valid, a.sanity])
    assert len(np.unique(allidx)) == 57


def test_split_ignores_unknown_and_unlabeled():
    g = graph_with_labels([0, 0, 0, 1, 1, 1, 2, -1], 3)
    s = split_source(g, 2, 0)
    allidx = np.concatenate([s.train, s.valid, s.sanity])
    assert set(allidx.tolist()) == {0, 1, 2, 3, 4, 5}


def test_split_tiny_class_warns(caplog):
    with caplog.at_level(logging.WARNING):
        s = split_source(graph_with_labels([0, 0, 1, 1, 1, 1], 2), 2, 0)
    assert "class 0" in caplog.text
    assert {0, 1} <= set(s.train.tolist())


def test_graph_and_pair_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    adj = CsrAdjacency.from_edges(5, [(0, 1), (1, 2), (3, 4)])
    src = LabeledGraph(adj, rng.normal(size=(5, 2)), np.array([0, 1, 0, 1, 0]), 2)
    tgt = LabeledGraph(adj, rng.normal(size=(5, 2)), np.array([0, 1, 2, 2, 0]), 3)
    write_graph(tmp_path / "source", src)
    write_graph(tmp_path / "target", tgt)
    back = load_graph(tmp_path / "source")
    assert back.adjacency.same_structure(adj)
    np.testing.assert_array_equal(back.features, src.features)
    (tmp_path / "meta.json").write_text('{"known_count": 2, "class_count": 3}')
    pair = load_pair(tmp_path)
    np.testing.assert_array_equal(pair.target.labels, [0, 1, 2, 2, 0])
    assert pair.unknown_id == 2


def test_labeled_graph_validation():
    adj = CsrAdjacency.from_edges(2, [])
    with pytest.raises(ValueError):
        LabeledGraph(adj, np.ones((3, 2)), np.zeros(2, dtype=int), 1)
    with pytest.raises(ValueError):
        LabeledGraph(adj, np.array([[1.0], [np.nan]]), np.zeros(2, dtype=int), 1)
    with pytest.raises(ValueError):
        LabeledGraph(adj, np.ones((2, 1)), np.array([0, 4]), 2)
