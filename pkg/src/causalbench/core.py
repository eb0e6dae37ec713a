"""Domain types and graph primitives: gene panels, causal graphs, probability matrices."""

from __future__ import annotations

import csv
import heapq
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AcyclicityError, PanelError, SchemaError, ShapeError

CONTROL = -1


@dataclass(frozen=True)
class GenePanel:
    """Ordered gene roster; position in ``symbols`` is the matrix axis index."""

    symbols: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __init__(self, symbols):
        symbols = tuple(str(s) for s in symbols)
        if len(symbols) < 2:
            raise PanelError(f"a panel needs at least 2 genes, got {len(symbols)}")
        seen = set()
        dups = sorted({s for s in symbols if s in seen or seen.add(s)})
        if dups:
            raise PanelError("duplicate gene symbols in panel: " + ", ".join(dups))
        object.__setattr__(self, "symbols", symbols)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(symbols)})

    @property
    def d(self) -> int:
        return len(self.symbols)

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return symbol in self._index

    def index(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise PanelError(f"gene {symbol!r} is not in the panel") from None

    def subset(self, keep) -> GenePanel:
        return GenePanel([self.symbols[i] for i in keep])

    @classmethod
    def from_file(cls, path) -> GenePanel:
        """One symbol per line; blank lines and ``#`` comments are skipped."""
        symbols = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                symbols.append(line)
        return cls(symbols)

    def to_file(self, path):
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class PerturbationLabel:
    """Either a panel gene index (``target``) or the non-targeting control."""

    target: int | None = None

    @property
    def is_control(self) -> bool:
        return self.target is None

    @property
    def code(self) -> int:
        return CONTROL if self.target is None else self.target

    @classmethod
    def parse(cls, token: str, panel: GenePanel) -> PerturbationLabel:
        token = token.strip()
        if token.lower() == "control":
            return cls(None)
        if token not in panel:
            raise PanelError(f"label references gene {token!r} absent from the panel")
        return cls(panel.index(token))


class CausalGraph:
    """Directed graph as a dense boolean adjacency (row = source, column = destination).

    Instances are read-only; the diagonal is always false.
    """

    __slots__ = ("_adj",)

    def __init__(self, adjacency):
        adj = np.array(adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ShapeError(f"adjacency must be square, got shape {adj.shape}")
        np.fill_diagonal(adj, False)
        adj.setflags(write=False)
        self._adj = adj

    @classmethod
    def empty(cls, d: int) -> CausalGraph:
        return cls(np.zeros((d, d), dtype=bool))

    @classmethod
    def from_edges(cls, d: int, edges) -> CausalGraph:
        adj = np.zeros((d, d), dtype=bool)
        for i, j in edges:
            adj[i, j] = True
        return cls(adj)

    @property
    def adjacency(self) -> np.ndarray:
        return self._adj

    @property
    def d(self) -> int:
        return self._adj.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self._adj))]

    @property
    def n_edges(self) -> int:
        return int(self._adj.sum())

    def __eq__(self, other):
        return isinstance(other, CausalGraph) and np.array_equal(self._adj, other._adj)

    def __hash__(self):
        return hash(self._adj.tobytes())

    def __repr__(self):
        return f"CausalGraph(d={self.d}, edges={self.n_edges})"

    def issubgraph(self, other: CausalGraph) -> bool:
        return not np.any(self._adj & ~other._adj)


class ProbabilityMatrix:
    """d x d edge probabilities; the diagonal holds NaN and is never evaluated."""

    __slots__ = ("_values",)

    def __init__(self, values):
        v = np.array(values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"probability matrix must be square, got shape {v.shape}")
        off = ~np.eye(v.shape[0], dtype=bool)
        vals = v[off]
        if np.any(~np.isfinite(vals)) or np.any((vals < 0) | (vals > 1)):
            raise ShapeError("off-diagonal probabilities must lie in [0, 1]")
        np.fill_diagonal(v, np.nan)
        v.setflags(write=False)
        self._values = v

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def d(self) -> int:
        return self._values.shape[0]

    def off_diagonal(self) -> np.ndarray:
        """Off-diagonal entries, row-major."""
        return self._values[~np.eye(self.d, dtype=bool)]

    def __eq__(self, other):
        return isinstance(other, ProbabilityMatrix) and np.array_equal(
            self._values, other._values, equal_nan=True
        )

    def __repr__(self):
        return f"ProbabilityMatrix(d={self.d})"


@dataclass(frozen=True)
class EdgeThreshold:
    gamma: float

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


def transitive_closure(g: CausalGraph) -> CausalGraph:
    """Ancestral closure: edge i->j iff a directed path of length >= 1 exists.

    Warshall's algorithm, one vectorised row update per pivot. Self-reachability
    through cycles is not recorded.
    """
    return CausalGraph(_reach_with_self(g))


def binarize(p: ProbabilityMatrix, t: EdgeThreshold | float) -> CausalGraph:
    """Edge i->j iff ``p[i, j] >= gamma`` (inclusive), i != j."""
    gamma = t.gamma if isinstance(t, EdgeThreshold) else EdgeThreshold(float(t)).gamma
    with np.errstate(invalid="ignore"):
        adj = p.values >= gamma
    return CausalGraph(adj)


# -- tabular matrix format ----------------------------------------------------
#
#   ,SYM_1,SYM_2,...,SYM_d          header: empty corner, then gene symbols
#   SYM_1,,v12,...,v1d              one row per source gene, diagonal empty
#   ...
#
# Adjacency values are written as 0/1, probabilities with repr() so they
# round-trip exactly.


def _write_matrix(path, panel: GenePanel, cells):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(panel.symbols))
    for i, sym in enumerate(panel.symbols):
        w.writerow([sym] + [("" if i == j else cells(i, j)) for j in range(panel.d)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _read_matrix(path, panel: GenePanel | None):
    rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines()))
    if not rows:
        raise SchemaError(f"{path}: empty matrix file")
    header = [h.strip() for h in rows[0][1:]]
    file_panel = GenePanel(header)
    body = rows[1:]
    if len(body) != file_panel.d:
        raise ShapeError(f"{path}: expected {file_panel.d} rows, found {len(body)}")
    d = file_panel.d
    out = np.full((d, d), np.nan)
    for i, row in enumerate(body):
        if row[0].strip() != file_panel.symbols[i]:
            raise SchemaError(
                f"{path}: row {i + 1} is {row[0]!r}, expected {file_panel.symbols[i]!r}"
            )
        if len(row) != d + 1:
            raise ShapeError(f"{path}: row {row[0]!r} has {len(row) - 1} values, expected {d}")
        for j, cell in enumerate(row[1:]):
            if i == j:
                continue
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise SchemaError(f"{path}: bad value {cell!r} at ({row[0]}, {header[j]})") from None
    if panel is not None and panel != file_panel:
        for s in file_panel.symbols:
            if s not in panel:
                raise SchemaError(f"{path}: gene {s!r} not in panel")
        if set(panel.symbols) != set(file_panel.symbols):
            missing = [s for s in panel.symbols if s not in file_panel]
            raise SchemaError(f"{path}: panel genes missing from file: {', '.join(missing)}")
        order = [file_panel.index(s) for s in panel.symbols]
        out = out[np.ix_(order, order)]
        file_panel = panel
    return file_panel, out


def write_graph(path, g: CausalGraph, panel: GenePanel):
    if g.d != panel.d:
        raise ShapeError(f"graph has d={g.d} but panel has {panel.d} genes")
    adj = g.adjacency
    _write_matrix(path, panel, lambda i, j: "1" if adj[i, j] else "0")


def read_graph(path, panel: GenePanel | None = None) -> tuple[GenePanel, CausalGraph]:
    panel, vals = _read_matrix(path, panel)
    off = ~np.eye(panel.d, dtype=bool)
    if not np.all(np.isin(vals[off], (0.0, 1.0))):
        raise SchemaError(f"{path}: adjacency entries must be 0 or 1")
    return panel, CausalGraph(np.where(off, vals, 0.0) == 1.0)


def write_probabilities(path, p: ProbabilityMatrix, panel: GenePanel):
    if p.d != panel.d:
        raise ShapeError(f"matrix has d={p.d} but panel has {panel.d} genes")
    v = p.values
    _write_matrix(path, panel, lambda i, j: repr(float(v[i, j])))


def read_probabilities(path, panel: GenePanel | None = None) -> tuple[GenePanel, ProbabilityMatrix]:
    panel, vals = _read_matrix(path, panel)
    return panel, ProbabilityMatrix(vals)


def f1_score(predicted: CausalGraph, truth: CausalGraph) -> float:
    """F1 of predicted edges against true edges (off-diagonal only)."""
    tp = int(np.sum(predicted.adjacency & truth.adjacency))
    fp = predicted.n_edges - tp
    fn = truth.n_edges - tp
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def is_acyclic(g: CausalGraph) -> bool:
    return not np.any(np.diag(_reach_with_self(g)))


def _reach_with_self(g: CausalGraph) -> np.ndarray:
    r = g.adjacency.copy()
    for k in range(g.d):
        r |= np.outer(r[:, k], r[k, :])
    return r


def topological_order(g: CausalGraph) -> list[int]:
    """Kahn's algorithm; smallest available index first for determinism."""
    adj = g.adjacency
    indeg = adj.sum(axis=0).astype(int)
    heap = [i for i in range(g.d) if indeg[i] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        i = heapq.heappop(heap)
        order.append(i)
        for j in np.nonzero(adj[i])[0]:
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(heap, int(j))
    if len(order) != g.d:
        raise AcyclicityError("graph contains a directed cycle")
    return order


__all__ = [
    "CONTROL",
    "GenePanel",
    "PerturbationLabel",
    "CausalGraph",
    "ProbabilityMatrix",
    "EdgeThreshold",
    "transitive_closure",
    "binarize",
    "write_graph",
    "read_graph",
    "write_probabilities",
    "read_probabilities",
    "f1_score",
    "is_acyclic",
    "topological_order",
]
