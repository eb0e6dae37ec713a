import csv
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from causalbench.core import CausalGraph, ProbabilityMatrix, transitive_closure
from causalbench.errors import ShapeError, UndefinedAUROCError
from causalbench.evaluation import (
    EvaluationMode,
    VariantResult,
    aggregate,
    auroc,
    delta_report,
    emit_report,
    evaluate,
    evaluate_campaign,
    format_cell,
    read_long_report,
    write_manifest,
)
from causalbench.prompt import PromptVariant, variant_matrix
from causalbench.synth import sample_dag


def pair_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def random_p(d, seed, levels=None):
    rng = np.random.default_rng(seed)
    v = rng.random((d, d)) if levels is None else rng.integers(0, levels, (d, d)) / levels
    np.fill_diagonal(v, 0.0)
    return ProbabilityMatrix(v)


# -- AUROC


def test_hand_example():
    assert auroc([0.9, 0.6, 0.4, 0.1], [1, 0, 1, 0]) == 0.75


def test_all_tied_scores():
    assert auroc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_single_class_raises():
    with pytest.raises(UndefinedAUROCError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ShapeError):
        auroc([0.1, 0.2], [1, 0, 1])


labelled = st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40).filter(
    lambda xs: 0 < sum(y for _, y in xs) < len(xs)
)


@given(labelled)
def test_matches_pair_counting(xs):
    s, y = zip(*xs)
    assert auroc(s, y) == pytest.approx(pair_oracle(s, y), abs=1e-12)


@given(labelled)
def test_monotone_transform_invariance(xs):
    s, y = zip(*xs)
    s = np.asarray(s, float)
    assert auroc(np.exp(3 * s) + 2, y) == pytest.approx(auroc(s, y), abs=1e-12)


@given(labelled)
def test_complement_labels(xs):
    s, y = zip(*xs)
    assert auroc(s, y) + auroc(s, [not v for v in y]) == pytest.approx(1.0, abs=1e-12)


# -- evaluation modes


def test_panel_permutation_invariance():
    g = sample_dag(12, 0.3, 1)
    p = random_p(12, 1)
    perm = np.random.default_rng(2).permutation(12)
    gp = CausalGraph(g.adjacency[np.ix_(perm, perm)])
    pp = ProbabilityMatrix(p.values[np.ix_(perm, perm)])
    for mode in EvaluationMode:
        assert evaluate(pp, gp, mode) == pytest.approx(evaluate(p, g, mode), abs=1e-12)


def test_undirected_ignores_orientation():
    g = sample_dag(10, 0.3, 4)
    p = random_p(10, 4)
    flipped = evaluate(ProbabilityMatrix(p.values.T), CausalGraph(g.adjacency.T), "undirected")
    assert flipped == evaluate(p, g, "undirected")


def test_undirected_uses_max():
    g = CausalGraph.from_edges(3, [(0, 1)])
    p = ProbabilityMatrix([[0, 0.1, 0.2], [0.9, 0, 0.3], [0.4, 0.5, 0]])
    # pairs (0,1),(0,2),(1,2) score 0.9, 0.4, 0.5 with labels 1, 0, 0
    assert evaluate(p, g, "undirected") == 1.0


def test_closure_modes_equal_direct_on_closed_binary_inputs():
    for seed in range(10):
        g = transitive_closure(sample_dag(9, 0.3, seed))
        if g.n_edges in (0, 72):
            continue
        rng = np.random.default_rng(seed)
        pred = transitive_closure(CausalGraph(g.adjacency ^ (rng.random((9, 9)) < 0.1) & ~np.eye(9, dtype=bool)))
        p = ProbabilityMatrix(pred.adjacency.astype(float))
        direct = evaluate(p, g, "direct")
        assert evaluate(p, g, "closure_pred") == pytest.approx(direct, abs=1e-12)
        assert evaluate(p, g, "closure-both") == pytest.approx(direct, abs=1e-12)


def test_closure_sweep_perfect_and_fixed_gamma():
    g = sample_dag(8, 0.3, 3)
    closed = transitive_closure(g)
    p = ProbabilityMatrix(np.where(g.adjacency, 0.9, 0.1) * ~np.eye(8, dtype=bool))
    assert evaluate(p, g, "closure_both") == 1.0
    # one threshold gives the single ROC point joined to the corners
    pred = transitive_closure(CausalGraph(p.values >= 0.5)).adjacency
    off = ~np.eye(8, dtype=bool)
    lab = closed.adjacency[off]
    tpr = (pred[off] & lab).sum() / lab.sum()
    fpr = (pred[off] & ~lab).sum() / (~lab).sum()
    assert evaluate(p, g, "closure_both", gamma=0.5) == pytest.approx((1 + tpr - fpr) / 2, abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        evaluate(random_p(4, 0), sample_dag(5, 0.5, 0))


def test_empty_truth_undefined():
    with pytest.raises(UndefinedAUROCError):
        evaluate(random_p(4, 0), CausalGraph.empty(4))


# -- aggregation


def test_aggregate():
    agg = aggregate([0.5, 0.7])
    assert agg.mean == pytest.approx(0.6) and agg.stderr == pytest.approx(0.1) and agg.n == 2
    one = aggregate([0.61])
    assert one == (0.61, 0.0, 1) and one.single_repetition
    with pytest.raises(ValueError):
        aggregate([])


def test_format_cell():
    assert format_cell(0.6251, 0.0119) == "0.625 (0.012)"


# -- reports


def all_results(seed=0):
    rng = np.random.default_rng(seed)
    return [VariantResult.from_reps(v, rng.uniform(0.4, 0.7, 3)) for v in variant_matrix()]


def test_matrix_report_shape(tmp_path):
    paths = emit_report(all_results(), tmp_path)
    assert [p.name for p in paths] == ["auroc_matrix_none.csv", "auroc_matrix_simple.csv", "auroc_matrix_guided.csv"]
    for p in paths:
        rows = list(csv.reader(open(p)))
        assert rows[0] == ["gene_context", "naive", "cancer", "mrna", "cancer_mrna", "evidence",
                           "cancer_mrna_evidence", "cancer_mrna_experiment"]
        assert [r[0] for r in rows[1:]] == ["none", "gene_desc", "gene_desc_suppl", "literature", "literature_suppl"]
        cells = [c for r in rows[1:] for c in r[1:]]
        assert len(cells) == 35
        assert all(len(c) == 13 and c[5] == " " and c[6] == "(" and c.endswith(")") for c in cells)


def test_empty_report_has_headers_only(tmp_path):
    for p in emit_report([], tmp_path):
        assert p.read_text().splitlines() == [
            "gene_context,naive,cancer,mrna,cancer_mrna,evidence,cancer_mrna_evidence,cancer_mrna_experiment"
        ]


def test_long_report_roundtrip(tmp_path):
    res = all_results(1)
    (path,) = emit_report(res, tmp_path, "long")
    back = read_long_report(path)
    assert [r.variant for r in back] == [r.variant for r in res]
    assert all(a.per_rep_auroc == b.per_rep_auroc for a, b in zip(back, res))
    with pytest.raises(ValueError):
        emit_report(res, tmp_path, "wide")


def test_delta_flags_single_cell(tmp_path):
    a = all_results(2)
    b = [VariantResult.from_reps(r.variant, r.per_rep_auroc) for r in a]
    b[17] = VariantResult.from_reps(b[17].variant, [x + 0.05 for x in b[17].per_rep_auroc])
    flagged = delta_report(a, b, tmp_path / "delta.csv", tol=1e-9)
    assert [c.variant for c in flagged] == [a[17].variant.id]
    assert flagged[0].delta == pytest.approx(0.05)
    rows = list(csv.DictReader(open(tmp_path / "delta.csv")))
    assert len(rows) == 105 and sum(int(r["flagged"]) for r in rows) == 1


def test_evaluate_campaign_groups_repetitions():
    g = sample_dag(6, 0.4, 0)
    v = PromptVariant("naive", "none", "none")
    mats = {(v.id, r): random_p(6, r) for r in range(4)}
    out = evaluate_campaign(SimpleNamespace(matrices=mats), g)
    assert len(out) == 1 and len(out[0].per_rep_auroc) == 4
    assert out[0].per_rep_auroc[2] == evaluate(mats[(v.id, 2)], g)


def test_manifest_deterministic(tmp_path):
    a = write_manifest(tmp_path / "a.json", {"b": 1, "a": 2}, seed=3).read_bytes()
    b = write_manifest(tmp_path / "b.json", {"a": 2, "b": 1}, seed=3).read_bytes()
    assert a == b
    assert b'"template_digest"' in a
