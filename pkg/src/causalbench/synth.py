"""Synthetic perturbation screens from linear-Gaussian SEMs over known DAGs.

The ancestral truth of a simulated screen is ``transitive_closure(dag)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import CONTROL, CausalGraph, GenePanel, topological_order, write_graph
from .ingest import ScreenMatrix, save_screen


@dataclass(frozen=True)
class SemParams:
    """Linear SEM settings.

    Edge weights are drawn uniformly from ``edge_weight_range`` (an interval
    not containing 0), with a random sign when ``random_sign`` is set. The
    targeted gene's equation gets ``knockdown_shift`` added, or is clamped to
    ``hard_value`` when ``hard_intervention`` is set.
    """

    edge_weight_range: tuple[float, float] = (0.5, 1.0)
    noise_sd: float = 1.0
    knockdown_shift: float = 3.0
    cells_per_condition: int = 500
    seed: int = 0
    random_sign: bool = False
    hard_intervention: bool = False
    hard_value: float = 0.0

    def __post_init__(self):
        lo, hi = self.edge_weight_range
        if lo > hi:
            raise ValueError("edge_weight_range must be (low, high)")
        if lo <= 0.0 <= hi:
            raise ValueError("edge_weight_range must exclude 0")
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be positive")
        if self.cells_per_condition < 2:
            raise ValueError("cells_per_condition must be at least 2")


def sample_dag(d: int, edge_prob: float, seed: int) -> CausalGraph:
    """Random DAG: edges only go forward along a seeded random node order."""
    if d < 2:
        raise ValueError("d must be at least 2")
    if not 0.0 <= edge_prob <= 1.0:
        raise ValueError("edge_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(d)
    upper = np.triu(rng.random((d, d)) < edge_prob, k=1)
    adj = np.zeros((d, d), dtype=bool)
    adj[np.ix_(perm, perm)] = upper
    return CausalGraph(adj)


def sample_weights(g: CausalGraph, sp: SemParams) -> np.ndarray:
    rng = np.random.default_rng([sp.seed, 0])
    lo, hi = sp.edge_weight_range
    w = rng.uniform(lo, hi, size=(g.d, g.d))
    if sp.random_sign:
        w *= rng.choice([-1.0, 1.0], size=(g.d, g.d))
    return np.where(g.adjacency, w, 0.0)


def _simulate_condition(weights, order, sp: SemParams, target: int | None, rng) -> np.ndarray:
    n, d = sp.cells_per_condition, weights.shape[0]
    x = np.zeros((n, d))
    noise = rng.normal(0.0, sp.noise_sd, size=(n, d))
    for j in order:
        if target == j and sp.hard_intervention:
            x[:, j] = sp.hard_value
            continue
        x[:, j] = x @ weights[:, j] + noise[:, j]
        if target == j:
            x[:, j] += sp.knockdown_shift
    return x


def simulate_screen(g: CausalGraph, sp: SemParams, panel: GenePanel | None = None) -> ScreenMatrix:
    """One control condition plus one condition per gene, each with its own derived seed."""
    order = topological_order(g)
    weights = sample_weights(g, sp)
    panel = panel or GenePanel([f"G{i}" for i in range(g.d)])
    blocks, labels, ids = [], [], []
    for cond, target in enumerate([None] + list(range(g.d))):
        rng = np.random.default_rng([sp.seed, 1, cond])
        blocks.append(_simulate_condition(weights, order, sp, target, rng))
        code = CONTROL if target is None else target
        name = "control" if target is None else panel.symbols[target]
        labels.extend([code] * sp.cells_per_condition)
        ids.extend(f"{name}_{c}" for c in range(sp.cells_per_condition))
    meta = {"synthetic": {"seed": sp.seed, "knockdown_shift": sp.knockdown_shift}}
    return ScreenMatrix(np.vstack(blocks), labels, panel, ids, meta)


def write_synthetic(out_dir, g: CausalGraph, screen: ScreenMatrix):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    screen.panel.to_file(out / "panel.txt")
    save_screen(screen, out / "matrix.tsv", out / "labels.tsv")
    write_graph(out / "true_dag.csv", g, screen.panel)
    return out
