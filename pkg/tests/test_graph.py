import numpy as np
import pytest

from pertgraph.errors import DataError, ParseError, UsageError
from pertgraph.graph import (
    GeneVocab,
    KnowledgeGraph,
    deg_coverage,
    degree_stats,
    hop_distances,
    load_edge_list,
    save_edge_list,
    topk_filter,
)


def build(names, edges):
    vocab = GeneVocab(names)
    return KnowledgeGraph.from_edges(vocab, edges)


def random_graph(n, density, seed):
    rng = np.random.default_rng(seed)
    vocab = GeneVocab([f"G{i}" for i in range(n)])
    edges = []
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < density:
                edges.append((u, v, float(rng.uniform(0.01, 1.0))))
    return KnowledgeGraph.from_edges(vocab, edges)


# --- loading -----------------------------------------------------------------


def test_load_symmetrizes_duplicate_lines(tmp_path):
    p = tmp_path / "edges.tsv"
    p.write_text("A\tB\t0.9\nB\tA\t0.9\n")
    g, dropped = load_edge_list(p, GeneVocab(["A", "B"]))
    assert g.n_edges == 1 and dropped == 0
    assert g.edge_weight_map() == {(0, 1): 0.9}


def test_load_empty_file(tmp_path):
    p = tmp_path / "edges.tsv"
    p.write_text("")
    g, dropped = load_edge_list(p, GeneVocab(["A", "B"]))
    assert g.n_edges == 0 and dropped == 0


def test_load_drops_out_of_vocab(tmp_path):
    p = tmp_path / "edges.tsv"
    p.write_text(
        "# comment line\n"
        "A\tB\t0.5\nA\tC\t0.4\nB\tC\t0.3\nA\tD\t0.2\nB\tZZZ\t0.1\n"
    )
    g, dropped = load_edge_list(p, GeneVocab(["A", "B", "C", "D"]))
    assert g.n_edges == 4
    assert dropped == 1


def test_load_malformed_line_reports_lineno(tmp_path):
    p = tmp_path / "edges.tsv"
    p.write_text("A\tB\t0.5\nA\tB\n")
    with pytest.raises(ParseError, match="line 2"):
        load_edge_list(p, GeneVocab(["A", "B"]))


def test_load_negative_weight(tmp_path):
    p = tmp_path / "edges.tsv"
    p.write_text("A\tB\t-0.5\n")
    with pytest.raises(DataError):
        load_edge_list(p, GeneVocab(["A", "B"]))


def test_save_load_round_trip(tmp_path):
    g = random_graph(12, 0.4, seed=3)
    path = tmp_path / "g.tsv"
    save_edge_list(g, path)
    g2, dropped = load_edge_list(path, g.vocab)
    assert dropped == 0
    assert g.edge_weight_map() == g2.edge_weight_map()


def test_duplicate_vocab_rejected():
    with pytest.raises(DataError):
        GeneVocab(["A", "A"])


# --- top-k filtering ----------------------------------------------------------


def test_topk_star_union_keeps_leaf_nominations():
    # center C with 5 leaves, weights 1..5: at k=2 the center nominates the two
    # heaviest, but every leaf's top-2 includes the center, so union keeps all 5.
    names = ["C", "L1", "L2", "L3", "L4", "L5"]
    edges = [(0, i, float(i)) for i in range(1, 6)]
    g = build(names, edges)
    f = topk_filter(g, 2)
    assert f.n_edges == 5
    # mutual mode keeps only the center's own nominations
    m = topk_filter(g, 2, mode="mutual")
    assert m.edge_set() == {(0, 4), (0, 5)}


def test_topk_noop_when_k_covers_max_degree():
    g = random_graph(20, 0.3, seed=1)
    max_deg = max(g.degree(u) for u in range(g.n_nodes))
    f = topk_filter(g, max_deg)
    assert f.edge_weight_map() == g.edge_weight_map()


def test_topk_complete_graph_tie_rule():
    # K4 with equal weights, k=1: every node nominates its lowest-index neighbor
    names = ["A", "B", "C", "D"]
    edges = [(u, v, 1.0) for u in range(4) for v in range(u + 1, 4)]
    g = build(names, edges)
    f = topk_filter(g, 1)
    assert f.edge_set() == {(0, 1), (0, 2), (0, 3)}
    assert f.n_edges <= 4


def test_topk_properties_random_graphs():
    # subgraph inclusion, idempotence, and the nominated-edge bound
    for seed in range(10):
        g = random_graph(30, 0.3, seed=seed)
        k = 3
        f = topk_filter(g, k)
        assert f.edge_set() <= g.edge_set()
        f2 = topk_filter(f, k)
        assert f2.edge_weight_map() == f.edge_weight_map()
        # each node's own nominations in the original graph number <= k
        from pertgraph.graph import nominations

        noms = nominations(g, k)
        assert all(len(s) <= k for s in noms)
        # every kept edge is nominated by at least one endpoint
        for (u, v) in f.edge_set():
            assert v in noms[u] or u in noms[v]


def test_topk_requires_positive_k():
    g = random_graph(5, 0.5, seed=0)
    with pytest.raises(UsageError):
        topk_filter(g, 0)


# --- statistics ----------------------------------------------------------------


def test_degree_stats_path_graph():
    g = build(["A", "B", "C"], [(0, 1, 1.0), (1, 2, 1.0)])
    s = degree_stats(g)
    assert s.n_nodes == 3 and s.n_edges == 2
    assert s.mean_degree == pytest.approx(4.0 / 3.0)
    assert s.median_degree == 1.0


def test_degree_stats_empty_graph():
    g = build(["A", "B", "C"], [])
    s = degree_stats(g)
    assert s.mean_degree == 0.0 and s.median_degree == 0.0


def test_mean_degree_bounded_after_topk():
    for seed in range(5):
        g = random_graph(100, 0.3, seed=seed)
        k = 10
        f = topk_filter(g, k)
        s = degree_stats(f)
        assert s.mean_degree <= 2 * k + 1e-12


# --- hops and coverage -----------------------------------------------------------


def test_hop_distances_path():
    g = build(["A", "B", "C", "X"], [(0, 1, 1.0), (1, 2, 1.0)])
    d = hop_distances(g, "A")
    assert d[0] == 0.0 and d[1] == 1.0 and d[2] == 2.0
    assert np.isinf(d[3])


def test_hop_distance_unknown_source():
    g = build(["A"], [])
    with pytest.raises(UsageError):
        hop_distances(g, "ZZ")


def test_deg_coverage_direct_neighbors():
    g = build(["P", "A", "B", "C"], [(0, 1, 1.0), (0, 2, 1.0), (2, 3, 1.0)])
    cov = deg_coverage(g, "P", ["A", "B"], max_hops=2)
    assert cov[0] == 1.0 and cov[1] == 1.0


def test_deg_coverage_unreachable():
    g = build(["P", "A", "B"], [])
    cov = deg_coverage(g, "P", ["A", "B"], max_hops=3)
    assert cov == [0.0, 0.0, 0.0]


def test_deg_coverage_star_with_isolated():
    # two selected leaves plus one isolated gene: h=1 coverage 2/3
    g = build(["P", "L1", "L2", "ISO"], [(0, 1, 1.0), (0, 2, 1.0)])
    cov = deg_coverage(g, "P", ["L1", "L2", "ISO"], max_hops=2)
    assert cov[0] == pytest.approx(2.0 / 3.0)
    assert cov[1] == pytest.approx(2.0 / 3.0)


def test_deg_coverage_monotone():
    for seed in range(5):
        g = random_graph(40, 0.08, seed=seed)
        rng = np.random.default_rng(seed + 100)
        degs = [f"G{i}" for i in rng.choice(40, size=8, replace=False)]
        cov = deg_coverage(g, "G0", degs, max_hops=6)
        assert all(b >= a for a, b in zip(cov, cov[1:]))
        assert all(0.0 <= c <= 1.0 for c in cov)


def test_deg_coverage_empty_set_rejected():
    g = build(["A", "B"], [(0, 1, 1.0)])
    with pytest.raises(UsageError):
        deg_coverage(g, "A", [], max_hops=2)
