"""Prompt variants, rendering, and campaign planning.

Prompts are assembled from the text assets in ``templates/``. Each variant is a
combination of an experimental context, a gene-specific context and a
chain-of-thought mode (7 x 5 x 3 = 105 variants).

The ``evidence`` experimental context is the "extra detail" instruction
paragraph; ``cancer_mrna_experiment`` is the Perturb-seq protocol paragraph,
which replaces the cancer/mRNA clauses with a Perturb-seq clause.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from string import Template

from ..core import GenePanel
from ..errors import PanelError

TEMPLATE_VERSION = "1"
MAX_PASSAGES = 100
RELATION_ORDER = ("associate", "interact", "positive_correlate", "negative_correlate")
PERSONA = (
    "You are a professional biologist who is an expert in assessing whether one gene has "
    "a causal effect or not on another. You reply concisely and always follow instructions exactly."
)


class ExperimentalContext(str, Enum):
    NAIVE = "naive"
    CANCER = "cancer"
    MRNA = "mrna"
    CANCER_MRNA = "cancer_mrna"
    EVIDENCE = "evidence"
    CANCER_MRNA_EVIDENCE = "cancer_mrna_evidence"
    CANCER_MRNA_EXPERIMENT = "cancer_mrna_experiment"


class GeneContext(str, Enum):
    NONE = "none"
    GENE_DESC = "gene_desc"
    GENE_DESC_SUPPL = "gene_desc_suppl"
    LITERATURE = "literature"
    LITERATURE_SUPPL = "literature_suppl"


class CoT(str, Enum):
    NONE = "none"
    SIMPLE = "simple"
    GUIDED = "guided"


MAX_NEW_TOKENS = {CoT.NONE: 10, CoT.SIMPLE: 200, CoT.GUIDED: 500}
COMPLETION_CUE = {CoT.NONE: "Probability =", CoT.SIMPLE: "Reason =", CoT.GUIDED: "Evidence"}

_CLAUSES = {
    ExperimentalContext.NAIVE: (),
    ExperimentalContext.CANCER: ("clause_cancer",),
    ExperimentalContext.MRNA: ("clause_mrna",),
    ExperimentalContext.CANCER_MRNA: ("clause_cancer", "clause_mrna"),
    ExperimentalContext.EVIDENCE: (),
    ExperimentalContext.CANCER_MRNA_EVIDENCE: ("clause_cancer", "clause_mrna"),
    ExperimentalContext.CANCER_MRNA_EXPERIMENT: ("clause_perturbseq",),
}
_DETAIL = {
    ExperimentalContext.EVIDENCE: "detail_evidence",
    ExperimentalContext.CANCER_MRNA_EVIDENCE: "detail_evidence",
    ExperimentalContext.CANCER_MRNA_EXPERIMENT: "detail_perturbseq",
}


@dataclass(frozen=True, order=True)
class PromptVariant:
    experimental_context: ExperimentalContext
    gene_context: GeneContext
    cot: CoT

    def __post_init__(self):
        object.__setattr__(self, "experimental_context", ExperimentalContext(self.experimental_context))
        object.__setattr__(self, "gene_context", GeneContext(self.gene_context))
        object.__setattr__(self, "cot", CoT(self.cot))

    @property
    def id(self) -> str:
        return f"{self.experimental_context.value}/{self.gene_context.value}/{self.cot.value}"

    @classmethod
    def parse(cls, text: str) -> PromptVariant:
        """Parse ``experimental/gene/cot``, e.g. ``cancer_mrna/none/none``."""
        parts = text.strip().split("/")
        if len(parts) != 3:
            raise ValueError(f"variant must look like 'experimental/gene/cot', got {text!r}")
        return cls(*parts)

    def __str__(self):
        return self.id


@dataclass
class GeneContextBundle:
    """Gene descriptions keyed by symbol and literature passages keyed by ordered pair."""

    descriptions: dict = field(default_factory=dict)
    literature: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    pair: tuple[str, str]
    variant: PromptVariant
    max_new_tokens: int
    system: str | None = None

    def messages(self) -> list[dict]:
        msgs = []
        if self.system is not None:
            msgs.append({"role": "system", "content": self.system})
        msgs.append({"role": "user", "content": self.text})
        return msgs


@lru_cache(maxsize=None)
def _asset(name: str) -> str:
    text = resources.files(__package__).joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


@lru_cache(maxsize=1)
def template_digest() -> str:
    """SHA-256 over every template asset, for run manifests."""
    h = hashlib.sha256(TEMPLATE_VERSION.encode())
    root = resources.files(__package__).joinpath("templates")
    for entry in sorted(root.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".txt"):
            h.update(entry.name.encode())
            h.update(entry.read_bytes())
    return h.hexdigest()


def _fill(name: str, **slots) -> str:
    return Template(_asset(name)).substitute(**slots)


def _gene_block(source, destination, v: PromptVariant, ctx: GeneContextBundle) -> str:
    gc = v.gene_context
    if gc is GeneContext.NONE:
        return ""
    if gc in (GeneContext.GENE_DESC, GeneContext.GENE_DESC_SUPPL):
        lines = [_asset("gene_desc_header" if gc is GeneContext.GENE_DESC else "gene_desc_suppl_header")]
        for gene in (source, destination):
            desc = ctx.descriptions.get(gene) or _asset("missing_description")
            lines.append(_fill("gene_description", gene=gene, description=desc))
        if gc is GeneContext.GENE_DESC_SUPPL:
            lines.append(_asset("gene_desc_suppl_note"))
    else:
        suppl = gc is GeneContext.LITERATURE_SUPPL
        lines = [_asset("literature_suppl_header" if suppl else "literature_header")]
        passages = list(ctx.literature.get((source, destination), ()))[:MAX_PASSAGES]
        if passages:
            lines.extend(passages)
        else:
            lines.append(_fill("literature_fallback", gene_a=source, gene_b=destination))
        if suppl:
            lines.append(_asset("literature_suppl_note"))
    return "\n".join(lines) + "\n"


def render_prompt(
    pair,
    v: PromptVariant,
    ctx: GeneContextBundle | None = None,
    panel: GenePanel | None = None,
    system_persona: bool = False,
) -> RenderedPrompt:
    """Instantiate the prompt for the ordered pair ``(source, destination)``.

    With ``system_persona`` the opening persona sentences move into a separate
    system message; otherwise the whole prompt is one user message.
    """
    source, destination = pair
    if panel is not None:
        for gene in (source, destination):
            if gene not in panel:
                raise PanelError(f"gene {gene!r} is not in the panel")
    if source == destination:
        raise PanelError("source and destination genes must differ")
    ctx = ctx or GeneContextBundle()

    clause = "".join(" " + _asset(c) for c in _CLAUSES[v.experimental_context])
    detail = _DETAIL.get(v.experimental_context)
    if v.cot is CoT.NONE:
        example_cot = query_cot = ""
        example_output = " Probability = {the 2dp probability}"
    elif v.cot is CoT.SIMPLE:
        example_cot = query_cot = " " + _asset("cot_simple")
        example_output = "\n" + _asset("cot_simple_output")
    else:
        example_cot = " " + _fill("cot_guided", gene_a="[Gene A]", gene_b="[Gene B]")
        query_cot = " " + _fill("cot_guided", gene_a=source, gene_b=destination)
        example_output = "\n" + _asset("cot_guided_output")

    text = _fill(
        "base",
        task_detail=(" " + _asset(detail)) if detail else "",
        context_clause=clause,
        example_cot=example_cot,
        example_output=example_output,
        gene_context=_gene_block(source, destination, v, ctx),
        source=source,
        destination=destination,
        query_cot=query_cot,
        cue=COMPLETION_CUE[v.cot],
    )
    system = None
    if system_persona:
        system = PERSONA
        text = text[len(PERSONA):].lstrip(" ")
    return RenderedPrompt(text, (source, destination), v, MAX_NEW_TOKENS[v.cot], system)


def variant_matrix() -> list[PromptVariant]:
    """All 105 variants, experimental-context-major, then gene context, then CoT."""
    return [PromptVariant(e, g, c) for e, g, c in itertools.product(ExperimentalContext, GeneContext, CoT)]


def bundle_from_evidence(descriptions, evidence) -> GeneContextBundle:
    """Build a bundle from ``LiteratureEvidence`` records.

    Passages for a pair are concatenated in relation-type order (associate,
    interact, positive_correlate, negative_correlate), each in retrieval order.
    """
    by_pair = {}
    for ev in sorted(evidence, key=lambda e: RELATION_ORDER.index(e.relation_type)):
        by_pair.setdefault(tuple(ev.pair), []).extend(p.text for p in ev.passages)
    return GeneContextBundle(dict(descriptions), by_pair)


@dataclass(frozen=True)
class PlanEntry:
    source: str
    destination: str
    variant: PromptVariant
    repetition: int
    digest: str

    @property
    def pair(self) -> tuple[str, str]:
        return (self.source, self.destination)


def _plan_digest(source, destination, variant, repetition) -> str:
    key = "\x1f".join([template_digest(), source, destination, variant.id, str(repetition)])
    return hashlib.sha256(key.encode("utf-8")).hexdigest()


def campaign_plan(panel: GenePanel, variants, repetitions: int) -> list[PlanEntry]:
    """Every ordered pair x variant x repetition, variant-major then repetition, source, destination."""
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    pairs = [(a, b) for a in panel.symbols for b in panel.symbols if a != b]
    return [
        PlanEntry(a, b, v, r, _plan_digest(a, b, v, r))
        for v in variants
        for r in range(repetitions)
        for a, b in pairs
    ]


def write_plan(path, plan):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "destination", "variant", "repetition", "digest"])
    for e in plan:
        w.writerow([e.source, e.destination, e.variant.id, e.repetition, e.digest])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
