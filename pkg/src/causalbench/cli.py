"""Command-line entry point: ``causalbench <subcommand> [options]``.

Every option can also be set in a config file (``--config PATH``) as
``key = value`` lines, with ``#`` comments, where ``key`` is the option name
with dashes replaced by underscores. An option left unset on the command line
and in the config file falls back to the environment variable
``CAUSALBENCH_<KEY>`` and then to its built-in default. Every run writes
``manifest.json`` into its output directory with the resolved settings.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 network error, 5 internal error.
"""

from __future__ import annotations

import argparse
import fnmatch
import hashlib
import logging
import os
import re
import sys
from pathlib import Path


from . import __version__
from .core import GenePanel, read_graph, read_probabilities, transitive_closure, write_graph, write_probabilities
from .errors import CausalBenchError, ConfigError, DataError

log = logging.getLogger("causalbench")

ENV_PREFIX = "CAUSALBENCH_"


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pair(text) -> tuple[str, str]:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2 or not all(parts):
        raise ValueError(f"expected SOURCE,DESTINATION, got {text!r}")
    return parts[0], parts[1]


def _counts(text) -> tuple[int, int, int, int]:
    parts = [int(p) for p in re.split(r"[,\s]+", str(text).strip())]
    if len(parts) != 4:
        raise ValueError("table needs four counts: a,b,c,d (rows: no edge / edge; columns: no literature / literature)")
    return tuple(parts)


# name: (type, default, help). Shared by flags, config files and environment.
OPTIONS = {
    "out_dir": (str, "out", "output directory"),
    "panel": (str, None, "gene panel file, one symbol per line"),
    "matrix": (str, None, "expression matrix (cells x genes, tab-separated, header of symbols)"),
    "labels": (str, None, "perturbation labels (cell id <TAB> target symbol or 'control')"),
    "triplets": (str, None, "sparse expression triplets (cell id, symbol, value) instead of --matrix"),
    "min_cell_total": (float, 0.0, "drop cells whose total expression is below this"),
    "min_gene_nonzero_fraction": (float, 0.0, "drop genes expressed in fewer control cells than this fraction"),
    "normalize": (_bool, True, "z-normalize against control moments"),
    "alpha": (float, 0.05, "FDR level for ancestral edges"),
    "correction_scope": (str, "global", "Benjamini-Hochberg family: global or per_perturbation"),
    "min_cells": (int, 2, "minimum cells per condition for a test"),
    "d": (int, 20, "number of genes"),
    "edge_prob": (float, 0.15, "edge probability of the random DAG"),
    "seed": (int, 0, "random seed"),
    "cells_per_condition": (int, 500, "cells per perturbation and for control"),
    "knockdown_shift": (float, 3.0, "shift added to the targeted gene"),
    "noise_sd": (float, 1.0, "noise standard deviation"),
    "pair": (_pair, None, "ordered gene pair SOURCE,DESTINATION"),
    "variants": (str, "naive/none/none", "comma-separated variant ids or glob patterns, or 'all'"),
    "repetitions": (int, 1, "repetitions per pair and variant"),
    "descriptions": (str, None, "gene description file (symbol <TAB> description)"),
    "literature_cache": (str, None, "PubTator cache file (JSON lines)"),
    "offline": (_bool, False, "never contact literature services; cache misses become gaps"),
    "system_persona": (_bool, False, "send the persona sentences as a system message"),
    "backend": (str, "http", "http, mock:oracle, mock:constant=V, mock:random=SEED or mock:corpus=PATH"),
    "truth": (str, None, "ground-truth graph CSV"),
    "cache_dir": (str, "cache", "directory for completion caches"),
    "base_url": (str, "http://localhost:8000/v1", "chat-completions base URL"),
    "model_name": (str, "gemma-2-9b-it", "model identifier sent to the endpoint"),
    "temperature": (float, 0.7, "sampling temperature"),
    "max_concurrency": (int, 4, "concurrent requests"),
    "requests_per_minute": (float, 600.0, "request rate limit"),
    "request_timeout": (float, 120.0, "per-request timeout in seconds"),
    "mode": (str, "direct", "direct, closure-pred, closure-both or undirected"),
    "gamma": (float, None, "fixed threshold for closure modes (default: sweep)"),
    "pred": (str, None, "probability matrix CSV"),
    "pred_dir": (str, None, "directory of per-variant probability matrices from 'run'"),
    "links": (str, None, "STRING protein links file"),
    "aliases": (str, None, "STRING protein aliases file"),
    "table": (_counts, None, "contingency counts a,b,c,d"),
    "grid_points": (int, 1000, "nuisance grid size for the Boschloo test"),
    "direction": (str, "either", "causal status of a pair: either or forward"),
    "results": (str, None, "long-format results CSV"),
    "compare": (str, None, "second long-format results CSV for a delta report"),
    "layout": (str, "matrix", "report layout: matrix or long"),
}

COMMANDS = {
    "ingest": ("load, filter and normalize a screen",
               ["panel", "matrix", "labels", "triplets", "min_cell_total", "min_gene_nonzero_fraction", "normalize"]),
    "ground-truth": ("derive the ancestral ground-truth graph",
                     ["panel", "matrix", "labels", "triplets", "alpha", "correction_scope", "min_cells"]),
    "synth": ("simulate a screen from a random linear SEM",
              ["d", "edge_prob", "seed", "cells_per_condition", "knockdown_shift", "noise_sd"]),
    "prompts": ("render a prompt or write a campaign plan",
                ["panel", "pair", "variants", "repetitions", "descriptions", "literature_cache", "offline",
                 "system_persona"]),
    "run": ("execute a prompt campaign",
            ["panel", "variants", "repetitions", "descriptions", "literature_cache", "offline", "system_persona",
             "backend", "truth", "cache_dir", "base_url", "model_name", "temperature", "max_concurrency",
             "requests_per_minute", "request_timeout", "seed"]),
    "evaluate": ("score predictions against a truth graph", ["mode", "gamma", "truth", "pred", "pred_dir"]),
    "string-baseline": ("score STRING associations against a truth graph", ["panel", "links", "aliases", "truth"]),
    "literature-analysis": ("test literature presence against causal edges",
                            ["table", "truth", "literature_cache", "grid_points", "direction"]),
    "report": ("format results as matrices, or compare two runs", ["results", "compare", "layout"]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causalbench", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (summary, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary)
        if name == "prompts":
            p.add_argument("action", choices=["render", "plan"], help="render one prompt or write the plan")
        p.add_argument("--config", help="config file of 'key = value' lines")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        for opt in ["out_dir"] + opts:
            typ, default, helptext = OPTIONS[opt]
            flag = "--" + opt.replace("_", "-")
            suffix = "" if default is None else f" (default: {default})"
            if typ is _bool:
                p.add_argument(flag, dest=opt, nargs="?", const=True, type=_bool, default=None, help=helptext + suffix)
            else:
                p.add_argument(flag, dest=opt, type=str, default=None, help=helptext + suffix)
    return parser


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if key not in OPTIONS:
            raise ConfigError(f"{path}:{lineno}: unknown setting {key!r}")
        out[key] = value.strip()
    return out


def resolve(args: argparse.Namespace, names) -> dict:
    """Settings with precedence: flags > config file > environment > defaults."""
    config = read_config(args.config) if args.config else {}
    out = {}
    for name in names:
        typ, default, _ = OPTIONS[name]
        raw, origin = getattr(args, name, None), "flag"
        if raw is None and name in config:
            raw, origin = config[name], "config"
        if raw is None and ENV_PREFIX + name.upper() in os.environ:
            raw, origin = os.environ[ENV_PREFIX + name.upper()], "environment"
        if raw is None:
            out[name] = default
            continue
        try:
            out[name] = typ(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {name} (from {origin}): {exc}") from None
    return out


def _require(cfg, *names):
    missing = [n for n in names if cfg.get(n) is None]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest(cfg, command, outputs, **extra):
    from .evaluation import write_manifest

    out = Path(cfg["out_dir"])
    files = {str(Path(p).relative_to(out)): _sha256(p) for p in outputs}
    write_manifest(out / "manifest.json", {k: v for k, v in sorted(cfg.items())}, command=command, outputs=files, **extra)


def _out(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_screen(cfg):
    from .ingest import load_screen, load_screen_triplets

    _require(cfg, "panel", "labels")
    panel = GenePanel.from_file(cfg["panel"])
    if cfg.get("triplets"):
        return load_screen_triplets(cfg["triplets"], cfg["labels"], panel)
    _require(cfg, "matrix")
    return load_screen(cfg["matrix"], cfg["labels"], panel)


def _select_variants(spec: str):
    from .prompt import variant_matrix

    allv = variant_matrix()
    if spec.strip() == "all":
        return allv
    chosen = []
    for pat in (p.strip() for p in spec.split(",") if p.strip()):
        hits = [v for v in allv if fnmatch.fnmatchcase(v.id, pat)]
        if not hits:
            raise ConfigError(f"variant pattern {pat!r} matches no variant")
        chosen.extend(v for v in hits if v not in chosen)
    return chosen


def _context(cfg, panel, variants):
    """Gene-context bundle for the selected variants, or None when none needs one."""
    from .knowledge import KeyValueStore, fetch_literature, load_gene_descriptions
    from .prompt import GeneContext, bundle_from_evidence

    needs_desc = any(v.gene_context in (GeneContext.GENE_DESC, GeneContext.GENE_DESC_SUPPL) for v in variants)
    needs_lit = any(v.gene_context in (GeneContext.LITERATURE, GeneContext.LITERATURE_SUPPL) for v in variants)
    descriptions, evidence = {}, []
    if needs_desc:
        if cfg.get("descriptions"):
            descriptions, _ = load_gene_descriptions(cfg["descriptions"], panel)
        else:
            log.warning("no --descriptions given; every gene uses the missing-description text")
    if needs_lit:
        pairs = [(a, b) for a in panel.symbols for b in panel.symbols if a != b]
        store = KeyValueStore(cfg.get("literature_cache"))
        evidence, gaps = fetch_literature(pairs, store, offline=cfg["offline"])
        if gaps:
            log.warning("%d pairs have no literature result and use the fallback paragraph", len(gaps))
    if not (needs_desc or needs_lit):
        return None
    return bundle_from_evidence(descriptions, evidence)


def _pred_name(variant_id: str, rep: int) -> str:
    return variant_id.replace("/", "__") + f"__rep{rep}.csv"


_PRED_RE = re.compile(r"^(?P<e>[a-z_]+?)__(?P<g>[a-z_]+?)__(?P<c>[a-z]+)__rep(?P<r>\d+)\.csv$")


# -- subcommands --------------------------------------------------------------


def cmd_ingest(cfg):
    from .ingest import FilterParams, filter_low_quality, save_screen, z_normalize

    s = _load_screen(cfg)
    s = filter_low_quality(s, FilterParams(cfg["min_cell_total"], cfg["min_gene_nonzero_fraction"]))
    if cfg["normalize"]:
        s = z_normalize(s)
    out = _out(cfg)
    s.panel.to_file(out / "panel.txt")
    save_screen(s, out / "matrix.tsv", out / "labels.tsv")
    outputs = [out / "panel.txt", out / "matrix.tsv", out / "labels.tsv"]
    _manifest(cfg, "ingest", outputs, cells=s.n_cells, genes=s.panel.d)
    print(f"{s.n_cells} cells x {s.panel.d} genes written to {out}")


def cmd_ground_truth(cfg):
    from .groundtruth import build_ancestral_graph, write_ledger

    s = _load_screen(cfg)
    g, ledger = build_ancestral_graph(s, cfg["alpha"], cfg["correction_scope"], cfg["min_cells"])
    out = _out(cfg)
    write_graph(out / "ancestral_graph.csv", g, s.panel)
    write_ledger(out / "test_ledger.csv", ledger, s.panel, cfg["alpha"], cfg["correction_scope"])
    _manifest(cfg, "ground-truth", [out / "ancestral_graph.csv", out / "test_ledger.csv"], edges=g.n_edges)
    print(f"{g.n_edges} ancestral edges among {s.panel.d} genes")


def cmd_synth(cfg):
    from .synth import SemParams, sample_dag, simulate_screen, write_synthetic

    g = sample_dag(cfg["d"], cfg["edge_prob"], cfg["seed"])
    sp = SemParams(noise_sd=cfg["noise_sd"], knockdown_shift=cfg["knockdown_shift"],
                   cells_per_condition=cfg["cells_per_condition"], seed=cfg["seed"])
    screen = simulate_screen(g, sp)
    out = write_synthetic(_out(cfg), g, screen)
    write_graph(out / "true_closure.csv", transitive_closure(g), screen.panel)
    names = ["panel.txt", "matrix.tsv", "labels.tsv", "true_dag.csv", "true_closure.csv"]
    _manifest(cfg, "synth", [out / n for n in names], edges=g.n_edges)
    print(f"simulated {screen.n_cells} cells over {g.d} genes ({g.n_edges} edges) in {out}")


def cmd_prompts(cfg, action):
    from .prompt import campaign_plan, render_prompt, write_plan

    variants = _select_variants(cfg["variants"])
    panel = GenePanel.from_file(cfg["panel"]) if cfg.get("panel") else None
    if action == "render":
        _require(cfg, "pair")
        if panel is None:
            panel = GenePanel(list(cfg["pair"]))
        ctx = _context(cfg, panel, variants)
        for i, v in enumerate(variants):
            p = render_prompt(cfg["pair"], v, ctx, panel, cfg["system_persona"])
            if len(variants) > 1:
                print(("" if i == 0 else "\n") + f"### {v.id} (max_new_tokens={p.max_new_tokens})")
            if p.system is not None:
                print(f"[system] {p.system}\n[user]")
            print(p.text)
        return
    _require(cfg, "panel")
    plan = campaign_plan(panel, variants, cfg["repetitions"])
    out = _out(cfg)
    write_plan(out / "plan.csv", plan)
    _manifest(cfg, "prompts plan", [out / "plan.csv"], entries=len(plan))
    print(f"{len(plan)} plan entries written to {out / 'plan.csv'}")


def cmd_run(cfg):
    from .llmgateway import CompletionCache, EndpointConfig, HttpBackend, make_backend, run_campaign
    from .prompt import campaign_plan

    _require(cfg, "panel")
    panel = GenePanel.from_file(cfg["panel"])
    variants = _select_variants(cfg["variants"])
    truth = None
    if cfg["backend"] == "mock:oracle":
        _require(cfg, "truth")
        _, truth = read_graph(cfg["truth"], panel)
    ecfg = EndpointConfig.from_env(
        base_url=cfg["base_url"], model_name=cfg["model_name"], temperature=cfg["temperature"],
        request_timeout=cfg["request_timeout"], max_concurrency=cfg["max_concurrency"],
        requests_per_minute=cfg["requests_per_minute"],
    )
    backend = make_backend(cfg["backend"], ecfg, truth=truth, panel=panel)
    cache_dir = Path(cfg["cache_dir"])
    cache_name = re.sub(r"[^A-Za-z0-9_.-]+", "_", f"{cfg['backend']}_{ecfg.model_name}") + ".jsonl"
    cache = CompletionCache(cache_dir / cache_name)
    plan = campaign_plan(panel, variants, cfg["repetitions"])
    ctx = _context(cfg, panel, variants)
    try:
        result = run_campaign(plan, ecfg, cache, backend, panel, ctx, cfg["system_persona"])
    finally:
        if isinstance(backend, HttpBackend):
            backend.close()
    out = _out(cfg)
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    outputs = []
    for (vid, rep), mat in sorted(result.matrices.items()):
        path = pred_dir / _pred_name(vid, rep)
        write_probabilities(path, mat, panel)
        outputs.append(path)
    lines = ["variant,failed,total,rate_percent"]
    for vid, (f, t) in sorted(result.parse_failures.items()):
        lines.append(f"{vid},{f},{t},{100.0 * f / t:.3f}")
    (out / "parse_failures.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs.append(out / "parse_failures.csv")
    _manifest(cfg, "run", outputs, cache_file=str(cache.path), cache_sha256=cache.file_digest(),
              plan_entries=len(plan), api_key_set=ecfg.api_key is not None)
    print(f"{len(plan)} entries, {result.requests_made} new requests, "
          f"parse failures {100.0 * result.failure_rate():.3f}%")


def cmd_evaluate(cfg):
    from .evaluation import EvaluationMode, VariantResult, emit_report, evaluate
    from .prompt import PromptVariant

    _require(cfg, "truth")
    try:
        mode = EvaluationMode.parse(cfg["mode"])
    except ValueError:
        raise ConfigError(f"unknown evaluation mode {cfg['mode']!r}") from None
    if cfg.get("pred"):
        panel, truth = read_graph(cfg["truth"])
        _, p = read_probabilities(cfg["pred"], panel)
        value = evaluate(p, truth, mode, cfg["gamma"])
        print(f"auroc\t{value:.6f}")
        return
    _require(cfg, "pred_dir")
    panel, truth = read_graph(cfg["truth"])
    per_variant = {}
    for path in sorted(Path(cfg["pred_dir"]).glob("*.csv")):
        m = _PRED_RE.match(path.name)
        if not m:
            continue
        vid = f"{m['e']}/{m['g']}/{m['c']}"
        _, p = read_probabilities(path, panel)
        per_variant.setdefault(vid, []).append((int(m["r"]), evaluate(p, truth, mode, cfg["gamma"])))
    if not per_variant:
        raise DataError(f"no prediction files found in {cfg['pred_dir']}")
    results = [VariantResult.from_reps(PromptVariant.parse(v), [a for _, a in sorted(r)]) for v, r in per_variant.items()]
    out = _out(cfg)
    outputs = emit_report(results, out, "long") + emit_report(results, out, "matrix")
    _manifest(cfg, "evaluate", outputs, variants=len(results))
    for r in results:
        print(f"{r.variant.id}\t{r.mean:.6f}\t{r.stderr:.6f}")


def cmd_string_baseline(cfg):
    from .evaluation import evaluate
    from .knowledge import load_string_scores

    _require(cfg, "panel", "links", "aliases", "truth")
    panel = GenePanel.from_file(cfg["panel"])
    _, truth = read_graph(cfg["truth"], panel)
    scores = load_string_scores(cfg["links"], cfg["aliases"], panel)
    p = scores.as_probability()
    out = _out(cfg)
    write_probabilities(out / "string_scores.csv", p, panel)
    undirected = evaluate(p, truth, "undirected")
    direct = evaluate(p, truth, "direct")
    _manifest(cfg, "string-baseline", [out / "string_scores.csv"], auroc_undirected=undirected, auroc_direct=direct)
    print(f"auroc_undirected\t{undirected:.6f}\nauroc_direct\t{direct:.6f}")


def cmd_literature_analysis(cfg):
    from .knowledge import ContingencyTable2x2, KeyValueStore, contingency_report, literature_contingency

    if cfg.get("table"):
        table = ContingencyTable2x2(*cfg["table"])
    else:
        _require(cfg, "truth", "literature_cache")
        panel, truth = read_graph(cfg["truth"])
        store = KeyValueStore(cfg["literature_cache"])
        counts = {}
        for key in store.keys():
            _, a, b, _rtype = key.split("|")
            if a in panel and b in panel:
                counts[(a, b)] = counts.get((a, b), 0) + len(store.get(key))
        table = literature_contingency(truth, counts, panel, cfg["direction"])
    rep = contingency_report(table, cfg["grid_points"])
    out = _out(cfg)
    (out / "literature_contingency.txt").write_text(rep.to_text(), encoding="utf-8")
    _manifest(cfg, "literature-analysis", [out / "literature_contingency.txt"],
              fisher_p=rep.fisher_p, boschloo_p=rep.boschloo_p)
    print(rep.to_text(), end="")


def cmd_report(cfg):
    from .evaluation import delta_report, emit_report, read_long_report

    _require(cfg, "results")
    results = read_long_report(cfg["results"])
    out = _out(cfg)
    outputs = emit_report(results, out, cfg["layout"])
    if cfg.get("compare"):
        flagged = delta_report(results, read_long_report(cfg["compare"]), out / "delta.csv")
        outputs.append(out / "delta.csv")
        print(f"{len(flagged)} cells differ")
    _manifest(cfg, "report", outputs)
    for p in outputs:
        print(p)


HANDLERS = {
    "ingest": cmd_ingest,
    "ground-truth": cmd_ground_truth,
    "synth": cmd_synth,
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "string-baseline": cmd_string_baseline,
    "literature-analysis": cmd_literature_analysis,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    names = ["out_dir"] + COMMANDS[args.command][1]
    try:
        cfg = resolve(args, names)
        if args.command == "prompts":
            cmd_prompts(cfg, args.action)
        else:
            HANDLERS[args.command](cfg)
    except CausalBenchError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        log.error("%s", exc)
        return DataError.exit_code
    except ValueError as exc:
        log.error("%s", exc)
        return ConfigError.exit_code
    except Exception:
        log.exception("internal error")
        return CausalBenchError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
