"""AUROC scoring of probability matrices against ground-truth graphs, repetition
aggregation, and report files.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .core import CausalGraph, EdgeThreshold, ProbabilityMatrix, binarize, transitive_closure
from .errors import ShapeError, UndefinedAUROCError
from .prompt import CoT, ExperimentalContext, GeneContext, PromptVariant


class EvaluationMode(str, Enum):
    DIRECT = "direct"
    CLOSURE_PRED = "closure_pred"
    CLOSURE_BOTH = "closure_both"
    UNDIRECTED = "undirected"

    @classmethod
    def parse(cls, text: str) -> EvaluationMode:
        return cls(text.replace("-", "_"))


def auroc(scores, labels) -> float:
    """Rank-based AUROC; tied (positive, negative) pairs earn half credit.

    Raises
    ------
    UndefinedAUROCError
        If all labels belong to one class.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUROCError(f"AUROC undefined with {n_pos} positives and {n_neg} negatives")
    r = rankdata(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _off_diagonal(a: np.ndarray) -> np.ndarray:
    return a[~np.eye(a.shape[0], dtype=bool)]


def _roc_from_sweep(p: ProbabilityMatrix, truth_adj: np.ndarray, gammas) -> float:
    off = ~np.eye(truth_adj.shape[0], dtype=bool)
    labels = truth_adj[off]
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUROCError(f"AUROC undefined with {n_pos} positives and {n_neg} negatives")
    pts = [(0.0, 0.0), (1.0, 1.0)]
    for gamma in gammas:
        pred = transitive_closure(binarize(p, EdgeThreshold(float(gamma)))).adjacency[off]
        pts.append((np.count_nonzero(pred & ~labels) / n_neg, np.count_nonzero(pred & labels) / n_pos))
    fpr, tpr = np.array(sorted(set(pts))).T
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def evaluate(p: ProbabilityMatrix, truth: CausalGraph, mode=EvaluationMode.DIRECT, gamma: float | None = None) -> float:
    """AUROC of ``p`` against ``truth`` under one evaluation mode.

    ``direct`` scores every off-diagonal entry against the truth adjacency.
    ``closure_pred`` and ``closure_both`` sweep the threshold over every
    distinct off-diagonal value of ``p`` (or use the single ``gamma`` given),
    close each binarized prediction transitively and compare it with the truth
    (``closure_both`` closes the truth as well); the ROC points are joined to
    (0, 0) and (1, 1) and integrated by the trapezoid rule. ``undirected``
    scores each unordered pair once with ``max(p_ij, p_ji)`` against
    ``g_ij or g_ji``.
    """
    mode = EvaluationMode.parse(mode) if isinstance(mode, str) else mode
    if p.values.shape != truth.adjacency.shape:
        raise ShapeError(f"prediction is {p.values.shape} but truth is {truth.adjacency.shape}")
    adj = truth.adjacency
    if mode is EvaluationMode.DIRECT:
        return auroc(p.off_diagonal(), _off_diagonal(adj))
    if mode is EvaluationMode.UNDIRECTED:
        v = np.nan_to_num(p.values)
        iu = np.triu_indices(adj.shape[0], k=1)
        return auroc(np.maximum(v, v.T)[iu], (adj | adj.T)[iu])
    if mode is EvaluationMode.CLOSURE_BOTH:
        adj = transitive_closure(truth).adjacency
    gammas = np.unique(p.off_diagonal()) if gamma is None else [gamma]
    return _roc_from_sweep(p, adj, gammas)


class Aggregate(NamedTuple):
    mean: float
    stderr: float
    n: int

    @property
    def single_repetition(self) -> bool:
        """Flag: with one repetition the standard error is reported as 0."""
        return self.n == 1


def aggregate(per_rep) -> Aggregate:
    """Mean and standard error (sample sd / sqrt(n)) over repetitions."""
    x = np.asarray(per_rep, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("aggregate needs at least one repetition")
    if x.size == 1:
        return Aggregate(float(x[0]), 0.0, 1)
    return Aggregate(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)), int(x.size))


@dataclass
class VariantResult:
    variant: PromptVariant
    per_rep_auroc: list = field(default_factory=list)
    mean: float = float("nan")
    stderr: float = float("nan")

    @classmethod
    def from_reps(cls, variant, per_rep) -> VariantResult:
        agg = aggregate(per_rep)
        return cls(variant, [float(v) for v in per_rep], agg.mean, agg.stderr)


def evaluate_campaign(campaign, truth: CausalGraph, mode=EvaluationMode.DIRECT, gamma=None) -> list[VariantResult]:
    """One ``VariantResult`` per variant of a campaign, repetitions in order."""
    per_variant = {}
    for (vid, rep), mat in sorted(campaign.matrices.items()):
        per_variant.setdefault(vid, []).append(evaluate(mat, truth, mode, gamma))
    return [VariantResult.from_reps(PromptVariant.parse(v), reps) for v, reps in per_variant.items()]


def format_cell(mean: float, stderr: float) -> str:
    return f"{mean:.3f} ({stderr:.3f})"


def _write(path: Path, text: str):
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc.strerror or exc}") from exc


def _matrix_csv(results) -> str:
    cells = {(r.variant.gene_context, r.variant.experimental_context): format_cell(r.mean, r.stderr) for r in results}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gene_context"] + [e.value for e in ExperimentalContext])
    for g in GeneContext:
        if any((g, e) in cells for e in ExperimentalContext):
            w.writerow([g.value] + [cells.get((g, e), "") for e in ExperimentalContext])
    return buf.getvalue()


def emit_report(results, out_dir, layout: str = "matrix") -> list[Path]:
    """Write report files and return their paths.

    ``matrix`` writes ``auroc_matrix_<cot>.csv`` for each CoT level: experimental
    contexts as columns, gene contexts as rows, "mean (stderr)" cells. ``long``
    writes ``auroc_long.csv`` with one row per (variant, repetition).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if layout == "matrix":
        paths = []
        for cot in CoT:
            path = out / f"auroc_matrix_{cot.value}.csv"
            _write(path, _matrix_csv([r for r in results if r.variant.cot is cot]))
            paths.append(path)
        return paths
    if layout == "long":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "experimental_context", "gene_context", "cot", "repetition", "auroc"])
        for r in results:
            v = r.variant
            for rep, val in enumerate(r.per_rep_auroc):
                w.writerow([v.id, v.experimental_context.value, v.gene_context.value, v.cot.value, rep, repr(float(val))])
        path = out / "auroc_long.csv"
        _write(path, buf.getvalue())
        return [path]
    raise ValueError(f"layout must be 'matrix' or 'long', got {layout!r}")


def read_long_report(path) -> list[VariantResult]:
    per_variant = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            per_variant.setdefault(row["variant"], []).append((int(row["repetition"]), float(row["auroc"])))
    return [
        VariantResult.from_reps(PromptVariant.parse(v), [a for _, a in sorted(reps)])
        for v, reps in per_variant.items()
    ]


@dataclass(frozen=True)
class DeltaCell:
    variant: str
    mean_a: float
    mean_b: float

    @property
    def delta(self) -> float:
        return self.mean_b - self.mean_a


def delta_report(run_a, run_b, out_path=None, tol: float = 0.0) -> list[DeltaCell]:
    """Cellwise comparison of two result sets; returns the cells whose means differ by more than ``tol``.

    Variants present in only one run are ignored. With ``out_path`` every shared
    cell is written with a ``flagged`` column.
    """
    a = {r.variant.id: r for r in run_a}
    b = {r.variant.id: r for r in run_b}
    shared = [v for v in a if v in b]
    flagged = []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "mean_a", "mean_b", "delta", "flagged"])
    for v in shared:
        cell = DeltaCell(v, a[v].mean, b[v].mean)
        hit = abs(cell.delta) > tol
        if hit:
            flagged.append(cell)
        w.writerow([v, f"{cell.mean_a:.3f}", f"{cell.mean_b:.3f}", f"{cell.delta:+.3f}", int(hit)])
    if out_path is not None:
        _write(Path(out_path), buf.getvalue())
    return flagged


def write_manifest(path, config: dict, **extra) -> Path:
    """Run manifest: resolved configuration plus provenance fields, as sorted JSON."""
    from . import __version__
    from .prompt import TEMPLATE_VERSION, template_digest

    doc = {
        "package_version": __version__,
        "template_version": TEMPLATE_VERSION,
        "template_digest": template_digest(),
        "config": config,
    }
    doc.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write(path, json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path
