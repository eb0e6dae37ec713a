import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from causalbench.core import CausalGraph, GenePanel, f1_score, transitive_closure
from causalbench.errors import UnsupportedSizeError
from causalbench.groundtruth import (
    DifferentialSet,
    bh_adjust,
    build_ancestral_graph,
    differential_set,
    mann_whitney_exact,
    mann_whitney_u,
    write_ledger,
)
from causalbench.ingest import ScreenMatrix
from causalbench.synth import SemParams, simulate_screen

samples = st.lists(st.integers(-5, 5), min_size=1, max_size=7)


# -- oracles


def pair_count_u(a, b):
    return sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in a for y in b)


def exact_oracle(a, b):
    """Enumerate every split of the pooled sample; U by pair counting; smaller tail doubled."""
    pooled = list(a) + list(b)
    n1 = len(a)
    u_obs = pair_count_u(a, b)
    lo = hi = total = 0
    for idx in itertools.combinations(range(len(pooled)), n1):
        rest = [pooled[i] for i in range(len(pooled)) if i not in idx]
        u = pair_count_u([pooled[i] for i in idx], rest)
        total += 1
        lo += u <= u_obs
        hi += u >= u_obs
    return min(Fraction(1), 2 * min(Fraction(lo, total), Fraction(hi, total)))


def step_up_oracle(p):
    """Definitional BH: adjusted p_(k) = min over j >= k of (m / j) p_(j), capped at 1."""
    m = len(p)
    order = sorted(range(m), key=lambda i: (p[i], i))
    out = [0.0] * m
    running = 1.0
    for rank in range(m, 0, -1):
        i = order[rank - 1]
        running = min(running, (m / rank) * p[i])
        out[i] = running
    return out


# -- Mann-Whitney


def test_identical_samples():
    u, p = mann_whitney_u([1, 2, 3], [1, 2, 3])
    assert u == 4.5 and p >= 0.99


def test_separated_small_samples():
    u, _ = mann_whitney_u([1, 2], [3, 4])
    assert u == 0.0
    assert mann_whitney_exact([1, 2], [3, 4]) == pytest.approx(1 / 3, abs=1e-15)
    assert mann_whitney_exact([5], [5]) == 1.0


def test_all_identical_gives_one():
    assert mann_whitney_u([2, 2, 2], [2, 2])[1] == 1.0


@given(samples, samples)
def test_u_and_symmetry(a, b):
    u, p = mann_whitney_u(a, b)
    assert u == pair_count_u(a, b)
    assert mann_whitney_u(b, a)[1] == pytest.approx(p, abs=1e-14)
    assert mann_whitney_exact(a, b) == pytest.approx(mann_whitney_exact(b, a), abs=1e-14)
    assert 0.0 <= p <= 1.0


@given(samples, samples)
def test_exact_matches_enumeration_oracle(a, b):
    assert mann_whitney_exact(a, b) == pytest.approx(float(exact_oracle(a, b)), abs=1e-12)


def test_asymptotic_matches_scipy():
    rng = np.random.default_rng(21)
    for _ in range(300):
        a = rng.integers(0, 6, rng.integers(1, 30))
        b = rng.integers(0, 6, rng.integers(1, 30))
        if np.all(np.r_[a, b] == a[0]):
            continue
        ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
        u, p = mann_whitney_u(a, b)
        assert u == ref.statistic
        assert p == pytest.approx(ref.pvalue, rel=1e-12, abs=1e-15)


def test_exact_size_limit():
    with pytest.raises(UnsupportedSizeError):
        mann_whitney_exact(range(11), range(10))


def test_asymptotic_close_to_exact_from_three_per_group():
    # the normal approximation is within 0.05 of the exact value once both
    # groups have at least 3 tie-free observations
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(400):
        n1, n2 = rng.integers(3, 9, 2)
        a, b = rng.normal(size=n1), rng.normal(rng.uniform(-2, 2), size=n2)
        worst = max(worst, abs(mann_whitney_u(a, b)[1] - mann_whitney_exact(a, b)))
    assert worst <= 0.05


# -- Benjamini-Hochberg


def test_bh_hand_example():
    got = bh_adjust([0.005, 0.01, 0.03, 0.04])
    assert got == pytest.approx([0.02, 0.02, 0.04, 0.04], abs=1e-15)


def test_bh_trivial_cases():
    assert bh_adjust([0.0, 0.0, 0.0]).tolist() == [0.0, 0.0, 0.0]
    assert bh_adjust([0.37]).tolist() == [0.37]
    assert bh_adjust([]).size == 0


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60))
def test_bh_matches_step_up(p):
    assert bh_adjust(p).tolist() == step_up_oracle(p)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0.001, 0.5))
def test_bh_rejections_match_procedure(p, alpha):
    m = len(p)
    srt = sorted(p)
    k = max([j for j in range(1, m + 1) if srt[j - 1] <= j * alpha / m], default=0)
    cutoff = srt[k - 1] if k else -1.0
    expected = [x <= cutoff for x in p]
    adj = bh_adjust(p)
    got = [a <= alpha for a in adj]
    # decisions agree away from floating-point ties at the boundary
    boundary = [abs(a - alpha) < 1e-12 for a in adj]
    assert all(g == e or b for g, e, b in zip(got, expected, boundary))


@given(st.lists(st.floats(0, 1), min_size=2, max_size=30))
def test_bh_monotone_and_bounded(p):
    adj = bh_adjust(p)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(adj[order]) >= 0)
    assert np.all(adj >= np.asarray(p)) and np.all(adj <= 1)


# -- differential sets and the graph builder


def small_screen(values, labels):
    values = np.asarray(values, float)
    panel = GenePanel([f"G{i}" for i in range(values.shape[1])])
    return ScreenMatrix(values, labels, panel, [f"c{i}" for i in range(len(labels))])


def test_differential_set_empty_when_nothing_significant():
    s = small_screen(np.arange(12.0).reshape(4, 3), [-1, -1, 0, 1])
    assert differential_set(s, 0, np.ones(3)) == DifferentialSet(0, frozenset())


def test_chain_recovered():
    g = CausalGraph.from_edges(3, [(0, 1), (1, 2)])
    s = simulate_screen(g, SemParams(knockdown_shift=4.0, cells_per_condition=300, seed=3))
    got, ledger = build_ancestral_graph(s)
    assert set(got.edges()) == {(0, 1), (0, 2), (1, 2)}
    assert len(ledger) == 6
    assert [(r.perturbed, r.readout) for r in ledger] == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]


def test_descendants_found():
    g = CausalGraph.from_edges(5, [(0, 1), (1, 2), (2, 3), (0, 4)])
    s = simulate_screen(g, SemParams(knockdown_shift=4.0, cells_per_condition=400, seed=8))
    _, ledger = build_ancestral_graph(s)
    adj = np.ones((5, 5))
    for r in ledger:
        adj[r.perturbed, r.readout] = r.p_adjusted
    members = differential_set(s, 0, adj[0]).members
    assert members >= {1, 2, 3, 4}


def test_recovery_on_random_sem():
    from causalbench.synth import sample_dag

    g = sample_dag(10, 0.25, 5)
    s = simulate_screen(g, SemParams(cells_per_condition=300, seed=5))
    got, _ = build_ancestral_graph(s)
    assert f1_score(got, transitive_closure(g)) >= 0.9


def test_untested_perturbation_outside_family():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(43, 3))
    labels = [-1] * 20 + [0] * 20 + [1] * 3
    base = small_screen(v[:40], labels[:40])
    with_singleton = small_screen(np.vstack([v[:40], v[40:41]]), labels[:40] + [1])
    _, led_a = build_ancestral_graph(base)
    _, led_b = build_ancestral_graph(with_singleton)
    tested_a = {(r.perturbed, r.readout): r.p_adjusted for r in led_a if r.tested}
    tested_b = {(r.perturbed, r.readout): r.p_adjusted for r in led_b if r.tested}
    assert tested_a == tested_b
    skipped = [r for r in led_b if r.perturbed == 1]
    assert all(not r.tested and r.p_raw == 1.0 for r in skipped)


def test_scope_per_perturbation_uses_row_families():
    g = CausalGraph.from_edges(4, [(0, 1)])
    s = simulate_screen(g, SemParams(knockdown_shift=1.0, cells_per_condition=100, seed=2))
    _, led = build_ancestral_graph(s, correction_scope="per_perturbation")
    for k in range(4):
        row = [r for r in led if r.perturbed == k]
        expected = bh_adjust([r.p_raw for r in row])
        assert [r.p_adjusted for r in row] == expected.tolist()
    with pytest.raises(ValueError):
        build_ancestral_graph(s, correction_scope="nope")


def test_ledger_file(tmp_path):
    g = CausalGraph.from_edges(3, [(0, 1)])
    s = simulate_screen(g, SemParams(cells_per_condition=50, seed=1))
    got, led = build_ancestral_graph(s)
    write_ledger(tmp_path / "ledger.csv", led, s.panel)
    lines = (tmp_path / "ledger.csv").read_text().splitlines()
    assert lines[0].startswith("# mann-whitney")
    assert lines[3] == "perturbed,readout,U,p_raw,p_adjusted,significant"
    assert len(lines) == 4 + 6
    sig = {tuple(line.split(",")[:2]) for line in lines[4:] if line.endswith(",1")}
    assert sig == {(s.panel.symbols[i], s.panel.symbols[j]) for i, j in got.edges()}


def test_p_values_in_unit_interval():
    rng = np.random.default_rng(12)
    s = small_screen(rng.normal(size=(60, 4)), [-1] * 30 + list(rng.integers(0, 4, 30)))
    _, led = build_ancestral_graph(s)
    assert all(0 <= r.p_raw <= r.p_adjusted <= 1 for r in led)
    assert all(math.isfinite(r.u_statistic) for r in led if r.tested)
