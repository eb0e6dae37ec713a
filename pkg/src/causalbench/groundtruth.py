"""Ancestral ground-truth graphs from interventional screens.

For every perturbed gene k and readout gene j != k, the readout's expression in
cells targeting k is compared with control cells by a two-sided Mann-Whitney U
test. P-values are Benjamini-Hochberg adjusted and k -> j is drawn when the
adjusted p-value falls below alpha.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erfc
from scipy.stats import rankdata

from .core import CONTROL, CausalGraph
from .errors import EmptyControlError, UnsupportedSizeError
from .ingest import ScreenMatrix

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.05
EXACT_MAX_N = 20
CORRECTION_SCOPES = ("global", "per_perturbation")

MWU_CONVENTIONS = (
    "two-sided normal approximation; tie-corrected variance; continuity correction 0.5; "
    "U reported for the perturbed sample"
)


@dataclass(frozen=True)
class PairwiseTestResult:
    perturbed: int
    readout: int
    u_statistic: float
    p_raw: float
    p_adjusted: float
    tested: bool = True


@dataclass(frozen=True)
class DifferentialSet:
    perturbed: int
    members: frozenset


def _tie_term(pooled: np.ndarray) -> np.ndarray:
    """Sum of t^3 - t over tie groups, per column."""
    s = np.sort(pooled, axis=0)
    n = s.shape[0]
    out = np.zeros(s.shape[1])
    if n < 2:
        return out
    new_run = np.ones_like(s, dtype=bool)
    new_run[1:] = s[1:] != s[:-1]
    for c in np.nonzero(~new_run[1:].all(axis=0))[0]:
        t = np.diff(np.append(np.flatnonzero(new_run[:, c]), n)).astype(float)
        out[c] = np.sum(t**3 - t)
    return out


def _mwu_columns(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise U statistic of ``a`` and its two-sided asymptotic p-value."""
    n1, n2 = a.shape[0], b.shape[0]
    n = n1 + n2
    pooled = np.vstack([a, b])
    ranks = rankdata(pooled, axis=0)
    u = ranks[:n1].sum(axis=0) - n1 * (n1 + 1) / 2.0
    var = n1 * n2 / 12.0 * ((n + 1) - _tie_term(pooled) / (n * (n - 1)))
    dev = np.maximum(np.abs(u - n1 * n2 / 2.0) - 0.5, 0.0)
    p = np.ones_like(u)
    ok = var > 0
    p[ok] = np.minimum(1.0, erfc(dev[ok] / np.sqrt(var[ok]) / math.sqrt(2.0)))
    return u, p


def mann_whitney_u(a, b) -> tuple[float, float]:
    """Two-sided Mann-Whitney U test via the normal approximation.

    Parameters
    ----------
    a, b : array_like
        Finite samples, each of size at least 1.

    Returns
    -------
    u : float
        U statistic of ``a`` (number of pairs with a > b, ties counting 0.5).
    p : float
        Two-sided p-value with tie-corrected variance and a 0.5 continuity
        correction. Exactly 1 when every value is identical.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 1)
    b = np.asarray(b, dtype=float).reshape(-1, 1)
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("both samples need at least one observation")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("samples must be finite")
    u, p = _mwu_columns(a, b)
    return float(u[0]), float(p[0])


def mann_whitney_exact(a, b) -> float:
    """Exact permutation two-sided p-value (mid-ranks for ties), for n1 + n2 <= 20.

    Enumerates every assignment of the pooled mid-ranks to the first sample and
    doubles the smaller tail.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    n1, n = a.size, a.size + b.size
    if n > EXACT_MAX_N:
        raise UnsupportedSizeError(f"exact enumeration supports n1 + n2 <= {EXACT_MAX_N}, got {n}")
    if a.size < 1 or b.size < 1:
        raise ValueError("both samples need at least one observation")
    ranks = rankdata(np.concatenate([a, b]))
    observed = ranks[:n1].sum()
    combos = np.array(list(itertools.combinations(range(n), n1)))
    sums = ranks[combos].sum(axis=1)
    lower = np.count_nonzero(sums <= observed) / sums.size
    upper = np.count_nonzero(sums >= observed) / sums.size
    return min(1.0, 2.0 * min(lower, upper))


def bh_adjust(p_values) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(p_values, dtype=float)
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = (m / np.arange(1, m + 1)) * p[order]
    adj_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    out = np.empty(m)
    out[order] = adj_sorted
    return out


def differential_set(s: ScreenMatrix, k: int, adjusted_p_row, alpha: float = DEFAULT_ALPHA) -> DifferentialSet:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    row = np.asarray(adjusted_p_row, dtype=float)
    members = frozenset(int(j) for j in np.nonzero(row < alpha)[0] if j != k and j < s.panel.d)
    return DifferentialSet(k, members)


def build_ancestral_graph(
    s: ScreenMatrix,
    alpha: float = DEFAULT_ALPHA,
    correction_scope: str = "global",
    min_cells: int = 2,
) -> tuple[CausalGraph, list[PairwiseTestResult]]:
    """Test every (perturbed k, readout j) pair and draw k -> j for significant ones.

    Returns the graph and the full test ledger in canonical (k-major, j-minor)
    order. Perturbations with fewer than ``min_cells`` cells, or a screen with
    fewer than ``min_cells`` controls, are not tested: their entries carry
    p = 1 and ``tested=False`` and stay outside the BH family.
    """
    if correction_scope not in CORRECTION_SCOPES:
        raise ValueError(f"correction_scope must be one of {CORRECTION_SCOPES}")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    d = s.panel.d
    ctrl = s.values[s.labels == CONTROL]
    if ctrl.shape[0] == 0:
        raise EmptyControlError("screen has no control cells")

    u_grid = np.full((d, d), np.nan)
    p_raw = np.ones((d, d))
    tested = np.zeros((d, d), dtype=bool)
    off = ~np.eye(d, dtype=bool)
    for k in range(d):
        pert = s.values[s.labels == k]
        if pert.shape[0] == 0:
            log.warning("gene %s has no perturbed cells; outgoing row left empty", s.panel.symbols[k])
            continue
        if pert.shape[0] < min_cells or ctrl.shape[0] < min_cells:
            log.warning(
                "gene %s: %d perturbed / %d control cells (< %d); tests skipped, p recorded as 1",
                s.panel.symbols[k], pert.shape[0], ctrl.shape[0], min_cells,
            )
            continue
        cols = off[k]
        u, p = _mwu_columns(pert[:, cols], ctrl[:, cols])
        u_grid[k, cols] = u
        p_raw[k, cols] = p
        tested[k, cols] = True

    p_adj = np.ones((d, d))
    if correction_scope == "global":
        p_adj[tested] = bh_adjust(p_raw[tested])
    else:
        for k in range(d):
            if tested[k].any():
                p_adj[k, tested[k]] = bh_adjust(p_raw[k, tested[k]])

    adj = np.zeros((d, d), dtype=bool)
    for k in range(d):
        for j in differential_set(s, k, p_adj[k], alpha).members:
            adj[k, j] = tested[k, j]

    ledger = [
        PairwiseTestResult(k, j, float(u_grid[k, j]), float(p_raw[k, j]), float(p_adj[k, j]), bool(tested[k, j]))
        for k in range(d)
        for j in range(d)
        if j != k
    ]
    return CausalGraph(adj), ledger


def write_ledger(path, ledger, panel, alpha: float = DEFAULT_ALPHA, correction_scope: str = "global"):
    buf = io.StringIO()
    buf.write(f"# mann-whitney: {MWU_CONVENTIONS}\n")
    buf.write(f"# benjamini-hochberg scope: {correction_scope}\n")
    buf.write(f"# alpha: {alpha!r} (significant iff p_adjusted < alpha)\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["perturbed", "readout", "U", "p_raw", "p_adjusted", "significant"])
    for r in ledger:
        w.writerow([
            panel.symbols[r.perturbed],
            panel.symbols[r.readout],
            "" if math.isnan(r.u_statistic) else repr(r.u_statistic),
            repr(r.p_raw),
            repr(r.p_adjusted),
            int(r.tested and r.p_adjusted < alpha),
        ])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
