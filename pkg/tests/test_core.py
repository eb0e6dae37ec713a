import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from causalbench.core import (
    CausalGraph,
    EdgeThreshold,
    GenePanel,
    PerturbationLabel,
    ProbabilityMatrix,
    binarize,
    f1_score,
    is_acyclic,
    read_graph,
    read_probabilities,
    topological_order,
    transitive_closure,
    write_graph,
    write_probabilities,
)
from causalbench.errors import AcyclicityError, PanelError, SchemaError, ShapeError


def dfs_reach(adj):
    """Per-node depth-first reachability (paths of length >= 1)."""
    d = adj.shape[0]
    out = np.zeros_like(adj, dtype=bool)
    for s in range(d):
        stack = list(np.nonzero(adj[s])[0])
        while stack:
            v = stack.pop()
            if not out[s, v]:
                out[s, v] = True
                stack.extend(np.nonzero(adj[v])[0])
    return out


def random_dag(rng, d, p):
    perm = rng.permutation(d)
    adj = np.zeros((d, d), dtype=bool)
    adj[np.ix_(perm, perm)] = np.triu(rng.random((d, d)) < p, 1)
    return CausalGraph(adj)


adjacency = st.integers(2, 9).flatmap(lambda d: arrays(bool, (d, d)))


# -- panel and labels


def test_panel_rejects_duplicates_and_tiny():
    with pytest.raises(PanelError):
        GenePanel(["A", "B", "A"])
    with pytest.raises(PanelError):
        GenePanel(["A"])


def test_panel_file_roundtrip(tmp_path):
    p = GenePanel(["ATR", "CD47", "TP53"])
    p.to_file(tmp_path / "panel.txt")
    assert GenePanel.from_file(tmp_path / "panel.txt") == p
    assert p.index("CD47") == 1
    with pytest.raises(PanelError):
        p.index("NOPE")


def test_label_parse():
    p = GenePanel(["ATR", "CD47"])
    assert PerturbationLabel.parse("Control", p).is_control
    assert PerturbationLabel.parse("CD47", p).code == 1
    with pytest.raises(PanelError):
        PerturbationLabel.parse("NOT_A_GENE", p)


# -- graphs


def test_graph_forces_empty_diagonal():
    g = CausalGraph(np.ones((3, 3), dtype=bool))
    assert not g.adjacency.diagonal().any()
    assert g.n_edges == 6
    with pytest.raises(ShapeError):
        CausalGraph(np.zeros((2, 3)))


def test_closure_chain():
    g = CausalGraph.from_edges(3, [(0, 1), (1, 2)])
    assert set(transitive_closure(g).edges()) == {(0, 1), (1, 2), (0, 2)}


def test_closure_empty():
    assert transitive_closure(CausalGraph.empty(5)) == CausalGraph.empty(5)


def test_closure_matches_dfs_on_random_dags():
    rng = np.random.default_rng(11)
    for _ in range(30):
        d = int(rng.integers(2, 60))
        g = random_dag(rng, d, rng.uniform(0.02, 0.3))
        assert np.array_equal(transitive_closure(g).adjacency, dfs_reach(g.adjacency))


@given(adjacency)
def test_closure_properties(adj):
    g = CausalGraph(adj)
    c = transitive_closure(g)
    assert transitive_closure(c) == c
    assert g.issubgraph(c)
    expected = dfs_reach(g.adjacency)
    np.fill_diagonal(expected, False)
    assert np.array_equal(c.adjacency, expected)


@given(adjacency, st.floats(0, 1))
def test_binarize_zero_matrix(adj, gamma):
    p = ProbabilityMatrix(np.zeros(adj.shape))
    if gamma > 0:
        assert binarize(p, gamma).n_edges == 0


def test_binarize_keeps_boundary():
    v = np.zeros((3, 3))
    v[0, 2] = 1.0
    assert binarize(ProbabilityMatrix(v), EdgeThreshold(1.0)).edges() == [(0, 2)]
    assert binarize(ProbabilityMatrix(np.zeros((3, 3))), 0.5).n_edges == 0


def test_binarize_monotone_in_gamma():
    rng = np.random.default_rng(3)
    p = ProbabilityMatrix(rng.random((12, 12)).round(2))
    counts = [binarize(p, g).n_edges for g in np.unique(p.off_diagonal())]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_threshold_range():
    with pytest.raises(ValueError):
        EdgeThreshold(1.5)


def test_probability_validation():
    with pytest.raises(ShapeError):
        ProbabilityMatrix([[0, 2], [0, 0]])
    p = ProbabilityMatrix([[5, 0.2], [0.3, -1]])
    assert np.isnan(p.values.diagonal()).all()
    assert list(p.off_diagonal()) == [0.2, 0.3]


def test_topological_order_and_cycles():
    g = CausalGraph.from_edges(3, [(2, 0), (0, 1)])
    assert topological_order(g) == [2, 0, 1]
    cyc = CausalGraph.from_edges(3, [(0, 1), (1, 2), (2, 0)])
    assert not is_acyclic(cyc)
    with pytest.raises(AcyclicityError):
        topological_order(cyc)


def test_f1():
    t = CausalGraph.from_edges(3, [(0, 1), (1, 2)])
    assert f1_score(t, t) == 1.0
    assert f1_score(CausalGraph.from_edges(3, [(0, 1)]), t) == pytest.approx(2 / 3)


# -- file formats


def test_graph_and_probability_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    panel = GenePanel(["A", "B", "C", "D"])
    g = random_dag(rng, 4, 0.5)
    write_graph(tmp_path / "g.csv", g, panel)
    assert read_graph(tmp_path / "g.csv") == (panel, g)
    p = ProbabilityMatrix(rng.random((4, 4)))
    write_probabilities(tmp_path / "p.csv", p, panel)
    assert read_probabilities(tmp_path / "p.csv")[1] == p


def test_read_reorders_to_panel(tmp_path):
    panel = GenePanel(["A", "B", "C"])
    g = CausalGraph.from_edges(3, [(0, 2)])
    write_graph(tmp_path / "g.csv", g, panel)
    other = GenePanel(["C", "A", "B"])
    _, h = read_graph(tmp_path / "g.csv", other)
    assert h.edges() == [(1, 0)]
    with pytest.raises(SchemaError):
        read_graph(tmp_path / "g.csv", GenePanel(["A", "B", "X"]))
