"""External knowledge: PubTator literature, gene descriptions, STRING scores,
and the literature-vs-causality contingency analysis.
"""

from __future__ import annotations

import gzip
import json
import logging
import re
import threading
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import httpx
import numpy as np
from scipy.special import gammaln

from .core import CausalGraph, GenePanel, ProbabilityMatrix
from .errors import MappingError, RetrievalError, SchemaError

log = logging.getLogger(__name__)

RELATION_TYPES = ("associate", "interact", "positive_correlate", "negative_correlate")
PUBTATOR_URL = "https://www.ncbi.nlm.nih.gov/research/pubtator3-api"
EUTILS_URL = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"
DEFAULT_GRID_POINTS = 1000
MISSING_DESCRIPTION = None


# -- literature ---------------------------------------------------------------


@dataclass(frozen=True)
class Passage:
    text: str
    source_id: str | None = None


@dataclass(frozen=True)
class LiteratureEvidence:
    pair: tuple[str, str]
    relation_type: str
    passages: tuple[Passage, ...]

    def __post_init__(self):
        if self.relation_type not in RELATION_TYPES:
            raise ValueError(f"relation_type must be one of {RELATION_TYPES}, got {self.relation_type!r}")
        object.__setattr__(self, "pair", tuple(self.pair))
        object.__setattr__(self, "passages", tuple(self.passages))


class KeyValueStore:
    """Append-only JSON-lines store: one ``{"key", "value"}`` object per line."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._data = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for lineno, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), 1):
                if line.strip():
                    try:
                        rec = json.loads(line)
                        self._data[rec["key"]] = rec["value"]
                    except (ValueError, KeyError) as exc:
                        from .errors import CacheIntegrityError

                        raise CacheIntegrityError(f"{self.path}:{lineno}: unreadable record ({exc})") from None

    def __contains__(self, key):
        return key in self._data

    def get(self, key):
        return self._data.get(key)

    def keys(self) -> list[str]:
        return list(self._data)

    def put(self, key, value):
        with self._lock:
            self._data[key] = value
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "value": value}, ensure_ascii=False) + "\n")


_MARKUP = re.compile(r"</?m>|@@@|@[A-Z]+_\S+\s*")


def _clean(text: str) -> str:
    return re.sub(r"\s+", " ", _MARKUP.sub("", text)).strip()


def pubtator_query(relation_type: str, gene_a: str, gene_b: str) -> str:
    return f"relations:{relation_type}|@GENE_{gene_a}|@GENE_{gene_b}"


def extract_passages(payload: dict) -> list[Passage]:
    """Passages from a PubTator search response.

    Field paths: ``results[].text_hl`` (falling back to ``results[].title``) for
    the text, ``results[].pmid`` for the source article. Highlight markup is
    stripped.
    """
    out = []
    for res in payload.get("results", []) or []:
        text = res.get("text_hl") or res.get("title") or ""
        text = _clean(text)
        if text:
            pmid = res.get("pmid")
            out.append(Passage(text, None if pmid is None else str(pmid)))
    return out


def fetch_pubtator(
    pair,
    types=RELATION_TYPES,
    cache: KeyValueStore | None = None,
    client: httpx.Client | None = None,
    base_url: str = PUBTATOR_URL,
    max_passages: int = 100,
    max_retries: int = 3,
    offline: bool = False,
    sleep=time.sleep,
) -> list[LiteratureEvidence]:
    """Query the PubTator search API once per relation type for an ordered gene pair.

    Results, including empty ones, are cached under ``pubtator|A|B|type``. In
    ``offline`` mode a cache miss is a ``RetrievalError``.
    """
    a, b = pair
    cache = cache if cache is not None else KeyValueStore()
    own = client is None and not offline
    if own:
        client = httpx.Client(timeout=60.0)
    try:
        out = []
        for rtype in types:
            key = f"pubtator|{a}|{b}|{rtype}"
            if key not in cache:
                if offline:
                    raise RetrievalError(f"offline and no cached PubTator result for {key}")
                cache.put(key, _fetch_pages(client, base_url, rtype, a, b, max_passages, max_retries, sleep))
            passages = tuple(Passage(p["text"], p.get("source_id")) for p in cache.get(key))
            out.append(LiteratureEvidence((a, b), rtype, passages))
        return out
    finally:
        if own:
            client.close()


def _fetch_pages(client, base_url, rtype, a, b, max_passages, max_retries, sleep):
    url = base_url.rstrip("/") + "/search/"
    passages, page = [], 1
    while len(passages) < max_passages:
        params = {"text": pubtator_query(rtype, a, b), "page": page}
        payload = None
        for attempt in range(max_retries + 1):
            if attempt:
                sleep(min(30.0, 2.0**attempt))
            try:
                resp = client.get(url, params=params)
            except httpx.HTTPError as exc:
                log.warning("PubTator %s %s/%s attempt %d failed: %s", rtype, a, b, attempt + 1, exc)
                continue
            if resp.status_code == 200:
                payload = resp.json()
                break
            log.warning("PubTator %s %s/%s attempt %d: HTTP %d", rtype, a, b, attempt + 1, resp.status_code)
        if payload is None:
            raise RetrievalError(f"PubTator query failed for {a}/{b} ({rtype}) after {max_retries + 1} attempts")
        found = extract_passages(payload)
        passages.extend({"text": p.text, "source_id": p.source_id} for p in found)
        if not found or page >= int(payload.get("total_pages", 1) or 1):
            break
        page += 1
    return passages[:max_passages]


def fetch_literature(pairs, cache: KeyValueStore, max_consecutive_failures: int = 3,
                     **kwargs) -> tuple[list[LiteratureEvidence], list]:
    """Fetch evidence for many pairs; failed pairs are logged and returned as gaps.

    Offline cache misses are always gaps. ``max_consecutive_failures`` network
    failures in a row mean the service is unreachable and raise
    ``RetrievalError``.
    """
    evidence, gaps, streak = [], [], 0
    for pair in pairs:
        try:
            evidence.extend(fetch_pubtator(pair, cache=cache, **kwargs))
            streak = 0
        except RetrievalError as exc:
            log.warning("literature gap for %s/%s: %s", pair[0], pair[1], exc)
            gaps.append(tuple(pair))
            if not kwargs.get("offline"):
                streak += 1
                if streak >= max_consecutive_failures:
                    raise RetrievalError(f"{streak} consecutive literature queries failed; giving up") from None
    return evidence, gaps


# -- gene descriptions --------------------------------------------------------


def load_gene_descriptions(source, panel: GenePanel | None = None) -> tuple[dict, list[str]]:
    """Read a two-column tab-separated (symbol, description) file.

    Returns the description map and the panel genes without a description.
    Duplicate symbols keep the last row and emit a warning.
    """
    descriptions = {}
    text = Path(source).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        sym, sep, desc = line.partition("\t")
        if not sep:
            raise SchemaError(f"{source}:{lineno}: expected 'symbol<TAB>description'")
        sym, desc = sym.strip(), desc.strip()
        if sym in descriptions:
            warnings.warn(f"{source}:{lineno}: duplicate description for {sym}; keeping the later row", stacklevel=2)
        descriptions[sym] = desc
    missing = []
    if panel is not None:
        missing = [s for s in panel.symbols if not descriptions.get(s)]
        if missing:
            warnings.warn(f"no description for {len(missing)} panel genes: {', '.join(missing)}", stacklevel=2)
    return descriptions, missing


def fetch_gene_descriptions(symbols, out_path, client: httpx.Client | None = None, base_url: str = EUTILS_URL,
                            organism: str = "human") -> dict:
    """Populate a description file from the Entrez gene summaries via E-utilities."""
    own = client is None
    client = client or httpx.Client(timeout=60.0)
    base = base_url.rstrip("/")
    out = {}
    try:
        for sym in symbols:
            r = client.get(f"{base}/esearch.fcgi", params={
                "db": "gene", "term": f"{sym}[sym] AND {organism}[orgn]", "retmode": "json"})
            r.raise_for_status()
            ids = r.json().get("esearchresult", {}).get("idlist", [])
            if not ids:
                log.warning("no Entrez gene record for %s", sym)
                continue
            r = client.get(f"{base}/esummary.fcgi", params={"db": "gene", "id": ids[0], "retmode": "json"})
            r.raise_for_status()
            summary = r.json().get("result", {}).get(ids[0], {}).get("summary", "")
            if summary:
                out[sym] = " ".join(summary.split())
    except httpx.HTTPError as exc:
        raise RetrievalError(f"E-utilities request failed: {exc}") from None
    finally:
        if own:
            client.close()
    Path(out_path).write_text("".join(f"{s}\t{d}\n" for s, d in out.items()), encoding="utf-8")
    return out


# -- STRING -------------------------------------------------------------------


class StringScoreMatrix:
    """Symmetric, non-negative d x d combined scores with zero diagonal."""

    __slots__ = ("_values",)

    def __init__(self, values):
        v = np.array(values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise SchemaError("STRING score matrix must be square")
        if np.any(v < 0) or not np.array_equal(v, v.T):
            raise SchemaError("STRING scores must be symmetric and non-negative")
        np.fill_diagonal(v, 0.0)
        v.setflags(write=False)
        self._values = v

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def d(self) -> int:
        return self._values.shape[0]

    def as_probability(self, scale: float = 1000.0) -> ProbabilityMatrix:
        return ProbabilityMatrix(np.clip(self._values / scale, 0.0, 1.0))


def _open_text(path):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def _read_aliases(path, wanted):
    """(symbol -> {protein: set(sources)}) for the wanted symbols."""
    hits = {s: {} for s in wanted}
    with _open_text(path) as fh:
        for line in fh:
            if not line.strip() or line.startswith("#") or line.startswith("string_protein_id"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                parts = line.split()
            protein, alias = parts[0], parts[1]
            source = parts[2] if len(parts) > 2 else "default"
            if alias in hits:
                hits[alias].setdefault(protein, set()).add(source)
    return hits


def map_symbols(aliases_path, panel: GenePanel) -> dict:
    """Panel symbol -> STRING protein id.

    Unambiguous symbols map directly. For a symbol with several candidate
    proteins, the candidate is taken from the alias source that maps the most
    panel symbols one-to-one; remaining ties resolve to the smallest id.
    """
    hits = _read_aliases(aliases_path, panel.symbols)
    per_source = {}
    for sym, cands in hits.items():
        for protein, sources in cands.items():
            for src in sources:
                per_source.setdefault(src, {}).setdefault(sym, set()).add(protein)
    quality = {}
    for src, m in per_source.items():
        unique = {s: next(iter(p)) for s, p in m.items() if len(p) == 1}
        counts = {}
        for p in unique.values():
            counts[p] = counts.get(p, 0) + 1
        quality[src] = sum(1 for p in unique.values() if counts[p] == 1)
    ranked = sorted(per_source, key=lambda s: (-quality[s], s))

    mapping = {}
    for sym in panel.symbols:
        cands = hits[sym]
        if not cands:
            log.warning("STRING: no alias for %s", sym)
            continue
        if len(cands) == 1:
            mapping[sym] = next(iter(cands))
            continue
        chosen = None
        for src in ranked:
            prots = per_source[src].get(sym, set())
            if len(prots) == 1:
                chosen = next(iter(prots))
                break
        chosen = chosen or min(cands)
        log.info("STRING: %s ambiguous (%s); using %s", sym, ", ".join(sorted(cands)), chosen)
        mapping[sym] = chosen
    return mapping


def load_string_scores(links_path, aliases_path, panel: GenePanel) -> StringScoreMatrix:
    """Combined scores over the panel; unmapped genes and absent pairs score 0."""
    mapping = map_symbols(aliases_path, panel)
    if not mapping:
        raise MappingError("no panel gene could be mapped to a STRING protein")
    idx = {}
    for sym, prot in mapping.items():
        idx.setdefault(prot, []).append(panel.index(sym))
    d = panel.d
    scores = np.zeros((d, d))
    with _open_text(links_path) as fh:
        header = fh.readline().split()
        try:
            col = header.index("combined_score")
        except ValueError:
            raise SchemaError(f"{links_path}: header has no combined_score column") from None
        for line in fh:
            parts = line.split()
            if len(parts) <= col:
                continue
            ia, ib = idx.get(parts[0]), idx.get(parts[1])
            if ia is None or ib is None:
                continue
            s = float(parts[col])
            for i in ia:
                for j in ib:
                    if i != j:
                        scores[i, j] = max(scores[i, j], s)
                        scores[j, i] = max(scores[j, i], s)
    return StringScoreMatrix(scores)


# -- contingency analysis -----------------------------------------------------


@dataclass(frozen=True)
class ContingencyTable2x2:
    """Rows: no causal edge / causal edge. Columns: no literature / literature present.

    ``a b`` is the no-edge row, ``c d`` the edge row.
    """

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        for name in "abcd":
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"cell {name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))
        if self.a + self.b + self.c + self.d == 0:
            raise ValueError("contingency table is empty")

    @classmethod
    def from_rows(cls, rows) -> ContingencyTable2x2:
        (a, b), (c, d) = rows
        return cls(a, b, c, d)

    def as_rows(self):
        return ((self.a, self.b), (self.c, self.d))

    @property
    def total(self) -> int:
        return self.a + self.b + self.c + self.d


def literature_contingency(truth: CausalGraph, evidence, panel: GenePanel, direction: str = "either") -> ContingencyTable2x2:
    """Classify every ordered gene pair by literature presence and causal status.

    ``evidence`` maps ordered symbol pairs to passage lists or counts, or is an
    iterable of ``LiteratureEvidence``; presence means at least one passage
    across all relation types. With ``direction="either"`` a pair counts as
    causal when the truth has an edge in either direction; ``"forward"`` uses
    the pair's own direction only.
    """
    if direction not in ("either", "forward"):
        raise ValueError("direction must be 'either' or 'forward'")
    if not isinstance(evidence, dict):
        counts = {}
        for ev in evidence:
            counts[tuple(ev.pair)] = counts.get(tuple(ev.pair), 0) + len(ev.passages)
        evidence = counts
    present = np.zeros((panel.d, panel.d), dtype=bool)
    for (ga, gb), val in evidence.items():
        n = val if isinstance(val, (int, np.integer)) else len(val)
        if n > 0:
            present[panel.index(ga), panel.index(gb)] = True
    adj = truth.adjacency
    causal = adj | adj.T if direction == "either" else adj
    off = ~np.eye(panel.d, dtype=bool)
    return ContingencyTable2x2(
        int(np.sum(off & ~causal & ~present)),
        int(np.sum(off & ~causal & present)),
        int(np.sum(off & causal & ~present)),
        int(np.sum(off & causal & present)),
    )


def _log_factorials(n: int) -> np.ndarray:
    return gammaln(np.arange(n + 1) + 1.0)


def _hypergeom_upper_tail(x, n_total, k_success, n_draw, lf):
    """P(X >= x) for X ~ Hypergeom(population n_total, k_success successes, n_draw draws)."""
    lo, hi = max(0, n_draw - (n_total - k_success)), min(k_success, n_draw)
    if x <= lo:
        return 1.0
    if x > hi:
        return 0.0
    ks = np.arange(x, hi + 1)
    logp = (
        lf[k_success] - lf[ks] - lf[k_success - ks]
        + lf[n_total - k_success] - lf[n_draw - ks] - lf[n_total - k_success - n_draw + ks]
        - (lf[n_total] - lf[n_draw] - lf[n_total - n_draw])
    )
    return float(min(1.0, np.exp(logp).sum()))


def _as_table(t) -> ContingencyTable2x2:
    return t if isinstance(t, ContingencyTable2x2) else ContingencyTable2x2.from_rows(t)


def _degenerate(t: ContingencyTable2x2) -> bool:
    return min(t.a + t.b, t.c + t.d, t.a + t.c, t.b + t.d) == 0


def fisher_one_sided(t: ContingencyTable2x2) -> float:
    """One-sided Fisher p-value for "the causal row has the higher literature rate".

    Conditional on all margins, the causal-and-literature cell ``d`` is
    hypergeometric; the p-value is its upper tail at the observed count.
    """
    t = _as_table(t)
    if _degenerate(t):
        return 1.0
    n = t.total
    lf = _log_factorials(n)
    return _hypergeom_upper_tail(t.d, n, t.b + t.d, t.c + t.d, lf)


def _fisher_lattice_mask(n1, n2, x1_obs, x2_obs, rel_tol):
    """Boolean (n2+1, n1+1) mask of lattice tables at least as extreme as the observed one.

    Entry [x2, x1] is the table with ``x1`` successes out of ``n1`` in the first
    group and ``x2`` out of ``n2`` in the second; extremeness is the one-sided
    Fisher p-value P(X2 >= x2 | x1 + x2). Computed one anti-diagonal (fixed
    success total) at a time from shared log-factorials.
    """
    n = n1 + n2
    lf = _log_factorials(n)
    mask = np.zeros((n2 + 1, n1 + 1), dtype=bool)
    tails = {}
    for s in range(n + 1):
        lo, hi = max(0, s - n1), min(n2, s)
        k = np.arange(lo, hi + 1)
        logp = (lf[n2] - lf[k] - lf[n2 - k] + lf[n1] - lf[s - k] - lf[n1 - s + k]
                - (lf[n] - lf[s] - lf[n - s]))
        tail = np.minimum(np.cumsum(np.exp(logp)[::-1])[::-1], 1.0)
        tails[s] = (lo, tail)
    lo, tail = tails[x1_obs + x2_obs]
    observed = tail[x2_obs - lo]
    cutoff = observed * (1.0 + rel_tol)
    for s, (lo, tail) in tails.items():
        k = np.arange(lo, lo + tail.size)
        hit = tail <= cutoff
        mask[k[hit], s - k[hit]] = True
    return mask, observed


def nuisance_grid(grid_points: int) -> np.ndarray:
    """Midpoints of ``grid_points`` equal cells of (0, 1): inset 1/(2 * grid_points) from each end."""
    return (np.arange(grid_points) + 0.5) / grid_points


def _binomial_pmf_grid(n, pi, lf):
    x = np.arange(n + 1)[:, None]
    return np.exp(lf[n] - lf[x] - lf[n - x] + x * np.log(pi)[None, :] + (n - x) * np.log1p(-pi)[None, :])


def boschloo_one_sided(t: ContingencyTable2x2, grid_points: int = DEFAULT_GRID_POINTS,
                       chunk: int = 256, rel_tol: float = 1e-9) -> float:
    """One-sided Boschloo exact unconditional p-value.

    The two literature groups (the table's columns) are independent binomial
    samples of causal edges with a shared nuisance rate. The p-value is the
    largest probability, over a uniform grid of nuisance rates, of drawing a
    table whose one-sided Fisher p-value is at most the observed one.
    """
    if grid_points < 100:
        raise ValueError("grid_points must be at least 100")
    t = _as_table(t)
    if _degenerate(t):
        return 1.0
    n1, x1 = t.a + t.c, t.c
    n2, x2 = t.b + t.d, t.d
    mask, _ = _fisher_lattice_mask(n1, n2, x1, x2, rel_tol)
    pi = nuisance_grid(grid_points)
    lf = _log_factorials(max(n1, n2))
    b1 = _binomial_pmf_grid(n1, pi, lf)
    b2 = _binomial_pmf_grid(n2, pi, lf)
    totals = np.zeros(grid_points)
    for start in range(0, n2 + 1, chunk):
        stop = min(n2 + 1, start + chunk)
        block = mask[start:stop].astype(float) @ b1
        totals += np.einsum("ig,ig->g", b2[start:stop], block)
    return float(min(1.0, totals.max()))


@dataclass(frozen=True)
class ContingencyReport:
    table: ContingencyTable2x2
    fisher_p: float
    boschloo_p: float
    grid_points: int

    def to_text(self) -> str:
        t = self.table
        return (
            "                 no_literature  literature\n"
            f"no_causal_edge   {t.a:>13}  {t.b:>10}\n"
            f"causal_edge      {t.c:>13}  {t.d:>10}\n"
            f"fisher_one_sided_p   {self.fisher_p:.6f}\n"
            f"boschloo_one_sided_p {self.boschloo_p:.6f}\n"
            f"grid_points          {self.grid_points}\n"
        )


def contingency_report(t: ContingencyTable2x2, grid_points: int = DEFAULT_GRID_POINTS) -> ContingencyReport:
    t = _as_table(t)
    return ContingencyReport(t, fisher_one_sided(t), boschloo_one_sided(t, grid_points), grid_points)
