"""Loading, quality filtering and control-referenced z-normalisation of screen data.

Input contract
--------------
Matrix file
    UTF-8 delimited text (tab by default). First row: a corner label followed
    by gene symbols. Each further row: a cell identifier followed by one value
    per gene. Columns may appear in any order but must be exactly the panel.
Labels file
    Two columns, no header: cell identifier and either a panel gene symbol or
    the token ``control`` (case-insensitive). Blank lines and lines starting
    with ``#`` are ignored.
Triplet file (sparse alternative to the matrix file)
    Three columns, no header: cell identifier, gene symbol, value. Absent
    entries are zero. Cell order follows the labels file.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CONTROL, GenePanel, PerturbationLabel
from .errors import (
    DegenerateGeneError,
    EmptyControlError,
    LabelError,
    PanelError,
    SchemaError,
    ShapeError,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ScreenMatrix:
    """N cells x d genes plus one perturbation code per cell.

    ``labels[i]`` is the perturbed gene's panel index, or ``CONTROL`` (-1).
    ``meta`` records processing steps (filter thresholds, sd convention).
    """

    values: np.ndarray
    labels: np.ndarray
    panel: GenePanel
    cell_ids: tuple[str, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        labels = np.array(self.labels, dtype=int)
        if values.ndim != 2:
            raise ShapeError(f"expression matrix must be 2-D, got shape {values.shape}")
        n, d = values.shape
        if n < 1:
            raise ShapeError("screen has no cells")
        if d != self.panel.d:
            raise ShapeError(f"matrix has {d} genes but panel has {self.panel.d}")
        if labels.shape != (n,):
            raise ShapeError(f"{n} cells but {labels.shape[0]} labels")
        if len(self.cell_ids) != n:
            raise ShapeError(f"{n} cells but {len(self.cell_ids)} cell identifiers")
        if np.any((labels < CONTROL) | (labels >= d)):
            raise LabelError("label index outside the panel")
        if not np.any(labels == CONTROL):
            raise EmptyControlError("screen has no control cells")
        if not np.all(np.isfinite(values)):
            raise SchemaError("expression matrix contains non-finite values")
        values.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "cell_ids", tuple(self.cell_ids))

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def control_mask(self) -> np.ndarray:
        return self.labels == CONTROL

    def label(self, i: int) -> PerturbationLabel:
        code = int(self.labels[i])
        return PerturbationLabel(None if code == CONTROL else code)

    def cells_for(self, k: int) -> np.ndarray:
        return self.values[self.labels == k]

    def select_cells(self, mask) -> ScreenMatrix:
        mask = np.asarray(mask)
        ids = [c for c, keep in zip(self.cell_ids, mask) if keep]
        return ScreenMatrix(self.values[mask], self.labels[mask], self.panel, ids, dict(self.meta))


@dataclass(frozen=True)
class FilterParams:
    min_cell_total: float = 0.0
    min_gene_nonzero_fraction: float = 0.0

    def __post_init__(self):
        if self.min_cell_total < 0:
            raise ValueError("min_cell_total must be non-negative")
        if not 0.0 <= self.min_gene_nonzero_fraction <= 1.0:
            raise ValueError("min_gene_nonzero_fraction must lie in [0, 1]")


def _read_rows(path, delimiter):
    text = Path(path).read_text(encoding="utf-8")
    return [r for r in csv.reader(io.StringIO(text), delimiter=delimiter)]


def _read_labels(path, delimiter, panel):
    labels = {}
    for lineno, row in enumerate(_read_rows(path, delimiter), 1):
        if not row or not "".join(row).strip() or row[0].startswith("#"):
            continue
        if len(row) != 2:
            raise SchemaError(f"{path}:{lineno}: expected 2 columns, found {len(row)}")
        cell, token = row[0].strip(), row[1].strip()
        if cell in labels:
            raise LabelError(f"{path}:{lineno}: duplicate label for cell {cell!r}")
        try:
            labels[cell] = PerturbationLabel.parse(token, panel).code
        except PanelError as exc:
            raise LabelError(f"{path}:{lineno}: {exc}") from None
    return labels


def load_screen(matrix_path, labels_path, panel: GenePanel, delimiter="\t") -> ScreenMatrix:
    rows = [r for r in _read_rows(matrix_path, delimiter) if r]
    if not rows:
        raise SchemaError(f"{matrix_path}: empty matrix file")
    header = [h.strip() for h in rows[0][1:]]
    for sym in header:
        if sym not in panel:
            raise SchemaError(f"{matrix_path}: unknown gene symbol {sym!r} in header")
    if len(set(header)) != len(header):
        raise SchemaError(f"{matrix_path}: duplicate gene symbols in header")
    missing = [s for s in panel.symbols if s not in header]
    if missing:
        raise SchemaError(f"{matrix_path}: panel genes missing from header: {', '.join(missing)}")
    order = [header.index(s) for s in panel.symbols]

    labels = _read_labels(labels_path, delimiter, panel)
    body = rows[1:]
    if len(body) != len(labels):
        raise ShapeError(f"{len(body)} matrix rows but {len(labels)} labels")

    ids, codes = [], []
    values = np.empty((len(body), panel.d))
    for r, row in enumerate(body):
        if len(row) != len(header) + 1:
            raise ShapeError(f"{matrix_path}: row {r + 2} has {len(row) - 1} values, expected {len(header)}")
        cell = row[0].strip()
        if cell not in labels:
            raise LabelError(f"cell {cell!r} has no label entry")
        try:
            raw = [float(x) for x in row[1:]]
        except ValueError as exc:
            raise SchemaError(f"{matrix_path}: row {r + 2}: {exc}") from None
        values[r] = [raw[c] for c in order]
        ids.append(cell)
        codes.append(labels[cell])
    return ScreenMatrix(values, codes, panel, ids, {"source": str(matrix_path)})


def load_screen_triplets(triplet_path, labels_path, panel: GenePanel, delimiter="\t") -> ScreenMatrix:
    labels = _read_labels(labels_path, delimiter, panel)
    ids = list(labels)
    row_of = {c: i for i, c in enumerate(ids)}
    values = np.zeros((len(ids), panel.d))
    for lineno, row in enumerate(_read_rows(triplet_path, delimiter), 1):
        if not row or row[0].startswith("#"):
            continue
        if len(row) != 3:
            raise SchemaError(f"{triplet_path}:{lineno}: expected 3 columns, found {len(row)}")
        cell, sym, val = (x.strip() for x in row)
        if sym not in panel:
            raise SchemaError(f"{triplet_path}:{lineno}: unknown gene symbol {sym!r}")
        if cell not in row_of:
            raise LabelError(f"{triplet_path}:{lineno}: cell {cell!r} has no label entry")
        try:
            values[row_of[cell], panel.index(sym)] = float(val)
        except ValueError as exc:
            raise SchemaError(f"{triplet_path}:{lineno}: {exc}") from None
    return ScreenMatrix(values, [labels[c] for c in ids], panel, ids, {"source": str(triplet_path)})


def save_screen(s: ScreenMatrix, matrix_path, labels_path, delimiter="\t"):
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["cell"] + list(s.panel.symbols))
    for cell, row in zip(s.cell_ids, s.values):
        w.writerow([cell] + [repr(float(x)) for x in row])
    Path(matrix_path).write_text(buf.getvalue(), encoding="utf-8")

    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    for cell, code in zip(s.cell_ids, s.labels):
        w.writerow([cell, "control" if code == CONTROL else s.panel.symbols[code]])
    Path(labels_path).write_text(buf.getvalue(), encoding="utf-8")


def filter_low_quality(s: ScreenMatrix, fp: FilterParams = FilterParams()) -> ScreenMatrix:
    """Drop low-total cells, then genes rarely expressed in the surviving controls.

    Cells whose perturbation target was dropped are removed with it, since their
    label no longer indexes the panel.
    """
    keep_cells = s.values.sum(axis=1) >= fp.min_cell_total
    ctrl = keep_cells & s.control_mask
    if not np.any(ctrl):
        raise EmptyControlError("filtering removed every control cell")

    nonzero_frac = (s.values[ctrl] != 0).mean(axis=0)
    keep_genes = nonzero_frac >= fp.min_gene_nonzero_fraction
    dropped = [s.panel.symbols[g] for g in np.nonzero(~keep_genes)[0]]
    if keep_genes.sum() < 2:
        raise SchemaError("filtering leaves fewer than 2 genes")

    remap = np.full(s.panel.d, -2)
    remap[keep_genes] = np.arange(keep_genes.sum())
    codes = np.where(s.labels == CONTROL, CONTROL, remap[np.maximum(s.labels, 0)])
    keep_cells &= codes != -2

    log.info(
        "filter: kept %d/%d cells, %d/%d genes (min_cell_total=%g, min_gene_nonzero_fraction=%g)",
        keep_cells.sum(), s.n_cells, keep_genes.sum(), s.panel.d,
        fp.min_cell_total, fp.min_gene_nonzero_fraction,
    )
    if dropped:
        log.info("filter: dropped genes %s", ", ".join(dropped))

    meta = dict(s.meta)
    meta["filter"] = {
        "min_cell_total": fp.min_cell_total,
        "min_gene_nonzero_fraction": fp.min_gene_nonzero_fraction,
        "dropped_genes": dropped,
        "dropped_cells": int((~keep_cells).sum()),
    }
    ids = [c for c, k in zip(s.cell_ids, keep_cells) if k]
    return ScreenMatrix(
        s.values[np.ix_(keep_cells, keep_genes)],
        codes[keep_cells],
        s.panel.subset(np.nonzero(keep_genes)[0]),
        ids,
        meta,
    )


def control_moments(s: ScreenMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-gene control mean and population standard deviation.

    Sums are exactly rounded (``math.fsum``) so results do not depend on cell order.
    """
    ctrl = s.values[s.control_mask]
    n = ctrl.shape[0]
    mu = np.array([math.fsum(col) / n for col in ctrl.T])
    sd = np.array([math.sqrt(math.fsum((col - m) ** 2) / n) for col, m in zip(ctrl.T, mu)])
    return mu, sd


def z_normalize(s: ScreenMatrix) -> ScreenMatrix:
    if s.control_mask.sum() < 2:
        raise EmptyControlError("z-normalisation needs at least 2 control cells")
    mu, sd = control_moments(s)
    bad = [s.panel.symbols[g] for g in np.nonzero(sd == 0)[0]]
    if bad:
        raise DegenerateGeneError(bad)
    meta = dict(s.meta)
    meta["z_normalized"] = {"reference": "control", "sd_convention": "population"}
    return ScreenMatrix((s.values - mu) / sd, s.labels, s.panel, s.cell_ids, meta)
