import filecmp

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urlalign.errors import ParseError, ValidationError
from urlalign.graph import (BipartiteGraph, EngagementEdge, EngagementKind, IdMap, degree_stats,
                            load_edges, save_edges, split_edges)
from urlalign.synthetic import (generate_synthetic, load_corpus, save_corpus,
                                within_community_fraction)


def write(tmp_path, text, name="edges.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def check_consistent(g: BipartiteGraph):
    assert g.user_degrees.sum() == g.url_degrees.sum() == g.num_edges
    assert np.all((g.users >= 0) & (g.users < g.num_users))
    assert np.all((g.urls >= 0) & (g.urls < g.num_urls))
    for u in range(g.num_users):
        nbrs = g.neighbors(u)
        assert np.all(np.diff(nbrs) > 0)
        assert len(nbrs) == g.user_degrees[u]


def test_three_distinct_pairs(tmp_path):
    p = write(tmp_path, "0\t0\tFavorite\t1\n0\t1\tReply\t2\n1\t1\tShare\t1\n")
    g = load_edges(p)
    assert g.num_edges == 3
    assert (g.num_users, g.num_urls) == (2, 2)
    check_consistent(g)


def test_duplicate_pairs_merge_counts_and_kinds(tmp_path):
    p = write(tmp_path, "u\tw\tFavorite\t2\nu\tw\tRetweet\t3\n")
    g = load_edges(p)
    assert g.num_edges == 1
    assert g.counts[0] == 5
    assert g.kinds(0) == {EngagementKind.FAVORITE, EngagementKind.RETWEET}


def test_string_ids_are_remapped_with_sidecar(tmp_path):
    p = write(tmp_path, "# header comment\na\tb\tFavorite\t1\n")
    g = load_edges(p)
    assert (g.num_users, g.num_urls, g.num_edges) == (1, 1, 1)
    assert g.user_ids.to_original(g.user_ids.to_dense("a")) == "a"
    assert g.url_ids.to_original(0) == "b"
    assert IdMap.load(tmp_path / "edges.tsv.user_ids.tsv") == g.user_ids
    assert IdMap.load(tmp_path / "edges.tsv.url_ids.tsv") == g.url_ids


@pytest.mark.parametrize("text, line", [
    ("0\t0\tFavorite\t1\n0\t1\tFavorite\n", 2),
    ("0\t0\tFavorite\tmany\n", 1),
    ("# c\n\n0\t0\tFavorite\t0\n", 3),
])
def test_malformed_line_names_line_number(tmp_path, text, line):
    with pytest.raises(ParseError) as err:
        load_edges(write(tmp_path, text))
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_unknown_kind_is_validation_error(tmp_path):
    with pytest.raises(ValidationError, match="unknown engagement kind"):
        load_edges(write(tmp_path, "0\t0\tLike\t1\n"))


def test_empty_file_is_validation_error(tmp_path):
    with pytest.raises(ValidationError):
        load_edges(write(tmp_path, "# only a comment\n"))


def test_constructor_rejects_out_of_range_and_duplicates():
    with pytest.raises(ValidationError):
        BipartiteGraph(1, 1, [0], [1], [[1, 0, 0, 0]])
    with pytest.raises(ValidationError):
        BipartiteGraph(1, 1, [0, 0], [0, 0], [[1, 0, 0, 0], [1, 0, 0, 0]])
    with pytest.raises(ValidationError):
        EngagementEdge(0, 0, EngagementKind.SHARE, 0)


def test_graph_arrays_are_read_only():
    g = BipartiteGraph.from_edges([EngagementEdge(0, 0)])
    with pytest.raises(ValueError):
        g.users[0] = 1


edge_lists = st.lists(
    st.tuples(st.integers(0, 6), st.integers(0, 9), st.sampled_from(list(EngagementKind)), st.integers(1, 4)),
    min_size=1, max_size=40)


@settings(max_examples=60, deadline=None)
@given(edge_lists)
def test_save_load_round_trip(tmp_path_factory, records):
    tmp = tmp_path_factory.mktemp("rt")
    g = BipartiteGraph.from_edges(EngagementEdge(u, w, k, c) for u, w, k, c in records)
    check_consistent(g)
    path = tmp / "g.tsv"
    save_edges(g, path)
    loaded = load_edges(path)
    check_consistent(loaded)
    # compare through the id maps: dense ids may be renumbered
    orig = {(int(u), int(w)): tuple(kc) for u, w, kc in zip(g.users, g.urls, g.kind_counts)}
    back = {(int(loaded.user_ids.to_original(u)), int(loaded.url_ids.to_original(w))): tuple(kc)
            for u, w, kc in zip(loaded.users, loaded.urls, loaded.kind_counts)}
    assert orig == back
    # saving the reloaded graph reproduces the file exactly
    save_edges(loaded, tmp / "g2.tsv")
    assert sorted(path.read_text().splitlines()) == sorted((tmp / "g2.tsv").read_text().splitlines())


def test_dense_load_keeps_ids(tmp_path):
    p = write(tmp_path, "3\t1\tShare\t1\n")
    g = load_edges(p, dense=True, num_users=5, num_urls=2)
    assert (g.num_users, g.num_urls) == (5, 2)
    assert g.has_edge(3, 1) and not g.has_edge(3, 0)


def test_degree_stats_single_user():
    g = BipartiteGraph.from_edges([EngagementEdge(0, w) for w in range(3)])
    assert degree_stats(g).users.max == 3


def test_degree_stats_star():
    g = BipartiteGraph.from_edges([EngagementEdge(u, 0) for u in range(10)])
    s = degree_stats(g)
    assert s.urls.p95 == 10
    assert s.users.median == 1


def test_degree_stats_order_statistics():
    # user degrees 1..20: nearest-rank median is the 10th value, p95 the 19th
    edges = [EngagementEdge(u, w) for u in range(20) for w in range(u + 1)]
    s = degree_stats(BipartiteGraph.from_edges(edges))
    assert (s.users.min, s.users.median, s.users.p95, s.users.max) == (1, 10, 19, 20)


def test_degree_stats_empty():
    with pytest.raises(ValidationError):
        degree_stats(BipartiteGraph(0, 0, [], [], np.zeros((0, 4))))


def test_split_edges_partitions():
    corpus = generate_synthetic(num_users=40, num_urls=20, edges_per_user=5, seed=1)
    train, held = split_edges(corpus.graph, 0.2, seed=3)
    assert train.num_edges + len(held) == corpus.graph.num_edges
    assert len(held) == 40
    assert not any(train.has_edge(u, w) for u, w in held)


# -- synthetic generator ----------------------------------------------------------

def test_same_seed_gives_byte_identical_corpora(tmp_path):
    save_corpus(generate_synthetic(num_users=60, num_urls=30, edges_per_user=6, seed=7), tmp_path / "a")
    save_corpus(generate_synthetic(num_users=60, num_urls=30, edges_per_user=6, seed=7), tmp_path / "b")
    for name in ("edges.tsv", "contents.tsv", "labels.tsv", "corpus.json"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)


def test_different_seed_differs():
    a = generate_synthetic(num_users=60, num_urls=30, edges_per_user=6, seed=1)
    b = generate_synthetic(num_users=60, num_urls=30, edges_per_user=6, seed=2)
    assert a.graph != b.graph


def test_p_in_one_keeps_all_edges_in_community():
    c = generate_synthetic(num_users=80, num_urls=40, num_communities=4, edges_per_user=8, p_in=1.0)
    assert within_community_fraction(c.graph, c.user_community, c.url_community) == 1.0


def test_default_within_fraction_and_degrees():
    c = generate_synthetic(num_users=400, num_urls=200, num_communities=4, edges_per_user=30, p_in=0.9, seed=0)
    frac = within_community_fraction(c.graph, c.user_community, c.url_community)
    assert abs(frac - 0.9) <= 0.02
    assert np.all(c.graph.user_degrees == 30)
    s = degree_stats(c.graph)
    assert s.users.min == s.users.max == 30
    assert sorted(set(c.url_community.tolist())) == [0, 1, 2, 3]
    assert len(c.contents) == c.graph.num_urls


def test_remainder_assigned_round_robin():
    c = generate_synthetic(num_users=10, num_urls=7, num_communities=3, edges_per_user=2)
    assert np.bincount(c.url_community).tolist() == [3, 2, 2]
    assert np.bincount(c.user_community).tolist() == [4, 3, 3]


@pytest.mark.parametrize("kwargs", [dict(num_users=0), dict(num_urls=0), dict(num_communities=0),
                                    dict(p_in=0.5), dict(p_in=1.2)])
def test_generator_validation(kwargs):
    with pytest.raises(ValidationError):
        generate_synthetic(**{**dict(num_users=20, num_urls=10, edges_per_user=3), **kwargs})


def test_corpus_round_trip(tmp_path):
    c = generate_synthetic(num_users=30, num_urls=12, num_communities=3, edges_per_user=4, seed=5)
    save_corpus(c, tmp_path)
    back = load_corpus(tmp_path)
    assert back.graph == c.graph
    assert back.contents == c.contents
    assert np.array_equal(back.url_community, c.url_community)
    assert np.array_equal(back.user_community, c.user_community)
    pages, labels = back.sample_pages(3, seed=1)
    again, _ = c.sample_pages(3, seed=1)
    assert pages == again and labels.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2]
    assert not set(p.url for p in pages) & set(p.url for p in c.contents)
