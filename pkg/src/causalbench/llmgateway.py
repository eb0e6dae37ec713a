"""Prompt campaign execution against chat-completions endpoints or mock backends.

Every request is a fresh single-prompt conversation. Completions are cached in an
append-only JSON-lines file keyed by a digest of (messages, model, temperature,
max_new_tokens, repetition), so interrupted campaigns resume and warm reruns make
no requests.

Cache record (one JSON object per line)::

    {"digest": ..., "request": {"model", "temperature", "max_tokens", "pair",
     "variant", "repetition"}, "raw_text": ..., "parsed": float, "parse_ok": bool,
     "text_sha256": ..., "timestamp": ISO-8601 UTC}
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import httpx
import numpy as np

from .core import CausalGraph, GenePanel, ProbabilityMatrix
from .errors import (
    CacheIntegrityError,
    CampaignHalted,
    ConfigError,
    CorpusMissError,
    EndpointError,
    GatewayTimeout,
    NetworkError,
    TransportError,
)
from .prompt import GeneContextBundle, PlanEntry, RenderedPrompt, render_prompt

log = logging.getLogger(__name__)

API_KEY_ENV = "CAUSALBENCH_API_KEY"
BASE_URL_ENV = "CAUSALBENCH_BASE_URL"
RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "gemma-2-9b-it"
    temperature: float = 0.7
    request_timeout: float = 120.0
    max_concurrency: int = 4
    requests_per_minute: float = 600.0
    api_key: str | None = field(default=None, repr=False)
    max_retries: int = 5
    backoff_base: float = 1.0
    backoff_cap: float = 60.0

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be at least 1")
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ConfigError("temperature must be finite and non-negative")
        if not self.requests_per_minute > 0:
            raise ConfigError("requests_per_minute must be positive")

    @classmethod
    def from_env(cls, **overrides) -> EndpointConfig:
        overrides.setdefault("api_key", os.environ.get(API_KEY_ENV))
        if os.environ.get(BASE_URL_ENV) and "base_url" not in overrides:
            overrides["base_url"] = os.environ[BASE_URL_ENV]
        return cls(**overrides)


@dataclass(frozen=True)
class CompletionRecord:
    digest: str
    raw_text: str
    parsed_probability: float
    parse_ok: bool
    latency: float = 0.0


_PROB_RE = re.compile(r"Probability\s*=\s*([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)")


def parse_probability(raw_text: str) -> tuple[float, bool]:
    """Number after the last ``Probability =``, clipped to [0, 1]; ``(0.0, False)`` if absent."""
    if not isinstance(raw_text, str):
        return 0.0, False
    matches = list(re.finditer(r"Probability\s*=", raw_text))
    if not matches:
        return 0.0, False
    m = _PROB_RE.match(raw_text, matches[-1].start())
    if m is None:
        return 0.0, False
    value = float(m.group(1))
    if not math.isfinite(value):
        return 0.0, False
    return min(1.0, max(0.0, value)), True


def request_digest(prompt: RenderedPrompt, model: str, temperature: float, repetition: int) -> str:
    payload = json.dumps(
        [prompt.messages(), model, float(temperature), int(prompt.max_new_tokens), int(repetition)],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class TokenBucket:
    """Thread-safe token bucket: ``rate_per_minute`` sustained, bursts up to ``capacity``."""

    def __init__(self, rate_per_minute: float, capacity: float | None = None, clock=time.monotonic, sleep=time.sleep):
        self.rate = rate_per_minute / 60.0
        self.capacity = capacity if capacity is not None else max(1.0, self.rate)
        self.tokens = self.capacity
        self._clock, self._sleep = clock, sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = self._clock()
                self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.rate)
                self._last = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self._sleep(wait)


class HttpBackend:
    """Chat-completions client: POST ``{base_url}/chat/completions``.

    Request body: ``{"model", "messages", "max_tokens", "temperature"}``; the
    reply text is read from ``choices[0].message.content``. 408/429/5xx and
    transport failures are retried with exponential backoff and jitter.
    """

    def __init__(self, cfg: EndpointConfig, transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        self.cfg = cfg
        headers = {"Authorization": f"Bearer {cfg.api_key}"} if cfg.api_key else {}
        self._client = httpx.Client(
            base_url=cfg.base_url.rstrip("/") + "/",
            headers=headers,
            timeout=cfg.request_timeout,
            transport=transport,
        )
        self._bucket = TokenBucket(cfg.requests_per_minute)
        self._sleep = sleep
        self.attempts = 0

    def close(self):
        self._client.close()

    def _backoff(self, attempt: int) -> float:
        return min(self.cfg.backoff_cap, self.cfg.backoff_base * 2**attempt) * (0.5 + random.random() / 2)

    def complete(self, prompt: RenderedPrompt, repetition: int = 0) -> str:
        body = {
            "model": self.cfg.model_name,
            "messages": prompt.messages(),
            "max_tokens": prompt.max_new_tokens,
            "temperature": self.cfg.temperature,
        }
        last_exc = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self._sleep(self._backoff(attempt - 1))
            self._bucket.acquire()
            self.attempts += 1
            try:
                resp = self._client.post("chat/completions", json=body)
            except httpx.TimeoutException as exc:
                log.warning("attempt %d: timeout (%s)", attempt + 1, exc)
                last_exc = GatewayTimeout(f"request timed out after {self.cfg.request_timeout}s")
                continue
            except httpx.TransportError as exc:
                log.warning("attempt %d: transport failure (%s)", attempt + 1, exc)
                last_exc = TransportError(str(exc))
                continue
            log.info("attempt %d: HTTP %d", attempt + 1, resp.status_code)
            if resp.status_code in RETRYABLE_STATUS:
                last_exc = TransportError(f"HTTP {resp.status_code} after retries")
                continue
            if not resp.is_success:
                try:
                    detail = resp.json()
                except ValueError:
                    detail = resp.text
                raise EndpointError(f"endpoint returned HTTP {resp.status_code}: {detail}", resp.status_code, detail)
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise EndpointError(f"malformed completion payload: {exc}", resp.status_code, resp.text) from None
        raise last_exc


class MockBackend:
    """Deterministic stand-in for a model.

    Modes
    -----
    ``oracle``
        "Probability = 0.99" for pairs with an edge in ``truth``, else "Probability = 0.01".
    ``constant``
        "Probability = {value:.2f}" for every prompt.
    ``seeded_random``
        Uniform 2dp value derived from (seed, request digest).
    ``corpus``
        Replays recorded raw texts from a JSON-lines file of ``{"digest", "raw_text"}``.
    """

    def __init__(self, mode: str, *, truth: CausalGraph | None = None, panel: GenePanel | None = None,
                 value: float | None = None, seed: int | None = None, corpus=None):
        self.mode = mode
        self.requests = []
        if mode == "oracle":
            if truth is None or panel is None:
                raise ConfigError("oracle mock needs a truth graph and its panel")
            self.truth, self.panel = truth, panel
        elif mode == "constant":
            if value is None or not 0.0 <= value <= 1.0:
                raise ConfigError("constant mock needs a value in [0, 1]")
            self.value = value
        elif mode == "seeded_random":
            if seed is None:
                raise ConfigError("seeded_random mock needs a seed")
            self.seed = int(seed)
        elif mode == "corpus":
            if corpus is None:
                raise ConfigError("corpus mock needs a corpus file or mapping")
            self.corpus = corpus if isinstance(corpus, dict) else load_corpus(corpus)
        else:
            raise ConfigError(f"unknown mock mode {mode!r}")

    def complete(self, prompt: RenderedPrompt, repetition: int = 0, digest: str | None = None) -> str:
        self.requests.append(prompt.messages())
        if self.mode == "oracle":
            i, j = (self.panel.index(g) for g in prompt.pair)
            return "Probability = 0.99" if self.truth.adjacency[i, j] else "Probability = 0.01"
        if self.mode == "constant":
            return f"Probability = {self.value:.2f}"
        if self.mode == "seeded_random":
            h = hashlib.sha256(f"{self.seed}:{digest}".encode()).digest()
            u = int.from_bytes(h[:8], "big") / 2**64
            return f"Probability = {u:.2f}"
        try:
            return self.corpus[digest]
        except KeyError:
            raise CorpusMissError(f"no corpus entry for digest {digest}") from None


def load_corpus(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[rec["digest"]] = rec["raw_text"]
            except (ValueError, KeyError) as exc:
                raise CacheIntegrityError(f"{path}:{lineno}: bad corpus record ({exc})") from None
    return out


def make_backend(spec: str, cfg: EndpointConfig | None = None, truth=None, panel=None, transport=None):
    """Backend from a CLI spec: ``http``, ``mock:oracle``, ``mock:constant=0.5``,
    ``mock:random=SEED`` or ``mock:corpus=PATH``."""
    if spec == "http":
        return HttpBackend(cfg or EndpointConfig.from_env(), transport=transport)
    if not spec.startswith("mock:"):
        raise ConfigError(f"unknown backend {spec!r}")
    mode, _, arg = spec[5:].partition("=")
    if mode == "oracle":
        return MockBackend("oracle", truth=truth, panel=panel)
    if mode == "constant":
        return MockBackend("constant", value=float(arg))
    if mode in ("random", "seeded_random"):
        return MockBackend("seeded_random", seed=int(arg or 0))
    if mode == "corpus":
        return MockBackend("corpus", corpus=arg)
    raise ConfigError(f"unknown mock mode {mode!r}")


class CompletionCache:
    """Append-only JSON-lines record store keyed by request digest."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._records: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    digest, text = rec["digest"], rec["raw_text"]
                except (ValueError, KeyError) as exc:
                    raise CacheIntegrityError(f"{self.path}:{lineno}: unreadable record ({exc})") from None
                if rec.get("text_sha256") != hashlib.sha256(text.encode("utf-8")).hexdigest():
                    raise CacheIntegrityError(f"{self.path}:{lineno}: checksum mismatch for record {digest}")
                self._records[digest] = rec

    def __contains__(self, digest):
        return digest in self._records

    def __len__(self):
        return len(self._records)

    def get(self, digest) -> dict | None:
        return self._records.get(digest)

    def put(self, digest: str, request: dict, raw_text: str, parsed: float, parse_ok: bool):
        rec = {
            "digest": digest,
            "request": request,
            "raw_text": raw_text,
            "parsed": parsed,
            "parse_ok": parse_ok,
            "text_sha256": hashlib.sha256(raw_text.encode("utf-8")).hexdigest(),
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        with self._lock:
            if digest in self._records:
                return
            self._records[digest] = rec
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    def file_digest(self) -> str | None:
        if not self.path or not self.path.exists():
            return None
        return hashlib.sha256(self.path.read_bytes()).hexdigest()


@dataclass
class CampaignResult:
    """Assembled matrices keyed by ``(variant_id, repetition)`` plus parse statistics."""

    matrices: dict
    parse_failures: dict
    requests_made: int
    records: dict

    def failure_rate(self, variant_id: str | None = None) -> float:
        items = [self.parse_failures[variant_id]] if variant_id else self.parse_failures.values()
        failed = sum(f for f, _ in items)
        total = sum(t for _, t in items)
        return failed / total if total else 0.0


def complete(prompt: RenderedPrompt, cfg: EndpointConfig, backend=None, repetition: int = 0) -> str:
    """Single stateless completion through ``backend`` (an HTTP backend by default)."""
    own = backend is None
    backend = backend or HttpBackend(cfg)
    try:
        return _call(backend, prompt, repetition, request_digest(prompt, cfg.model_name, cfg.temperature, repetition))
    finally:
        if own:
            backend.close()


def _call(backend, prompt, repetition, digest):
    if isinstance(backend, MockBackend):
        return backend.complete(prompt, repetition, digest)
    return backend.complete(prompt, repetition)


def run_campaign(
    plan: list[PlanEntry],
    cfg: EndpointConfig,
    cache: CompletionCache,
    backend,
    panel: GenePanel,
    context: GeneContextBundle | None = None,
    system_persona: bool = False,
) -> CampaignResult:
    """Resolve every plan entry from cache or the backend and assemble probability matrices.

    Up to ``cfg.max_concurrency`` requests run at once; assembly is keyed by plan
    entry, so completion order does not matter. A transport failure that
    survives retries halts the campaign with ``CampaignHalted``; finished
    entries are already cached and a rerun resumes from there.
    """
    if not plan:
        raise ValueError("plan is empty")
    prompts = [render_prompt(e.pair, e.variant, context, panel, system_persona) for e in plan]
    digests = [request_digest(p, cfg.model_name, cfg.temperature, e.repetition) for p, e in zip(prompts, plan)]

    first_index = {}
    for i, dg in enumerate(digests):
        first_index.setdefault(dg, i)
    todo = [i for dg, i in first_index.items() if dg not in cache]
    calls = []
    halted = threading.Event()

    def work(i):
        if halted.is_set():
            return None
        e, p, dg = plan[i], prompts[i], digests[i]
        t0 = time.monotonic()
        calls.append(i)
        try:
            text = _call(backend, p, e.repetition, dg)
        except NetworkError as exc:
            halted.set()
            return exc
        value, ok = parse_probability(text)
        cache.put(
            dg,
            {
                "model": cfg.model_name,
                "temperature": cfg.temperature,
                "max_tokens": p.max_new_tokens,
                "pair": list(e.pair),
                "variant": e.variant.id,
                "repetition": e.repetition,
            },
            text,
            value,
            ok,
        )
        log.debug("entry %s done in %.3fs", e.digest[:12], time.monotonic() - t0)
        return None

    if todo:
        with ThreadPoolExecutor(max_workers=cfg.max_concurrency) as pool:
            outcomes = list(pool.map(work, todo))
        for i, outcome in zip(todo, outcomes):
            if isinstance(outcome, Exception):
                done = sum(1 for dg in digests if dg in cache)
                raise CampaignHalted(plan[i], done, outcome)

    d = panel.d
    mats: dict = {}
    failures: dict = {}
    records = {}
    for e, dg in zip(plan, digests):
        rec = cache.get(dg)
        key = (e.variant.id, e.repetition)
        if key not in mats:
            mats[key] = np.zeros((d, d))
        value, ok = parse_probability(rec["raw_text"])
        if value != rec["parsed"] or ok != rec["parse_ok"]:
            raise CacheIntegrityError(f"cached parse for record {dg} disagrees with its raw text")
        mats[key][panel.index(e.source), panel.index(e.destination)] = value
        f, t = failures.get(e.variant.id, (0, 0))
        failures[e.variant.id] = (f + (not ok), t + 1)
        records[e.digest] = CompletionRecord(dg, rec["raw_text"], value, ok)

    for vid, (f, t) in failures.items():
        log.info("variant %s: parse failures %d/%d (%.3f%%)", vid, f, t, 100.0 * f / t)
    return CampaignResult(
        {k: ProbabilityMatrix(v) for k, v in mats.items()}, failures, len(calls), records
    )
