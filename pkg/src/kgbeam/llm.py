"""Chat-completion gateway, prompt templates, and constrained-output parsing.

The gateway speaks any OpenAI-compatible ``/v1/chat/completions`` endpoint
with retry/backoff, records every exchange verbatim, and counts calls by
purpose.  Prompt templates live in versioned files under ``templates/`` and
come in constrained (JSON output) and unconstrained variants; the parser
recovers (name, score) pairs from replies and categorizes anything it cannot
clean.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from string import Template

import requests

from .errors import ApiError, OutputParseError, TransportError

TEMPLATE_VERSION = "v1"

PURPOSES = ("relation_prune", "entity_prune", "sufficiency", "answer", "topic_extract")
CLEANING_CATEGORIES = ("not_json", "schema_mismatch", "score_not_numeric", "name_unmatched")


@dataclass
class GenerationParams:
    model: str
    temperature: float = 0.0
    max_tokens: int = 256


@dataclass
class ChatExchange:
    """One prompt/reply round trip, reply stored verbatim."""

    purpose: str
    prompt: str
    model: str
    temperature: float
    max_tokens: int
    reply: str
    latency_ms: float
    attempts: int = 1
    token_usage: dict | None = None


class CallLedger:
    """Thread-safe per-purpose call counter; counts only ever increase."""

    def __init__(self):
        self._counts = {p: 0 for p in PURPOSES}
        self._lock = threading.Lock()

    def increment(self, purpose: str) -> None:
        if purpose not in self._counts:
            raise ValueError(f"unknown call purpose: {purpose!r}")
        with self._lock:
            self._counts[purpose] += 1

    def count(self, purpose: str) -> int:
        return self._counts[purpose]

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self._counts.values())

    def as_dict(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)


@dataclass
class CleaningReport:
    """Tally of model outputs that needed cleaning and how they failed.

    ``unparseable`` counts outputs that yielded no usable pairs at all; the
    per-category counts refine that (one output may hit several categories,
    and a partially-usable output may add categories without counting as
    unparseable).
    """

    total_outputs: int = 0
    unparseable: int = 0
    categories: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CLEANING_CATEGORIES})

    def record(self, *, failed: bool, categories: tuple[str, ...] = ()) -> None:
        self.total_outputs += 1
        if failed:
            self.unparseable += 1
        for cat in categories:
            if cat not in self.categories:
                raise ValueError(f"unknown cleaning category: {cat!r}")
            self.categories[cat] += 1

    def add_category(self, category: str, n: int = 1) -> None:
        """Tally an extra defect on an already-counted output."""
        if category not in self.categories:
            raise ValueError(f"unknown cleaning category: {category!r}")
        self.categories[category] += n

    def merge(self, other: "CleaningReport") -> None:
        self.total_outputs += other.total_outputs
        self.unparseable += other.unparseable
        for cat, n in other.categories.items():
            self.categories[cat] = self.categories.get(cat, 0) + n

    def as_dict(self) -> dict:
        return {
            "total_outputs": self.total_outputs,
            "unparseable": self.unparseable,
            "categories": dict(self.categories),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CleaningReport":
        report = cls()
        report.total_outputs = int(data.get("total_outputs", 0))
        report.unparseable = int(data.get("unparseable", 0))
        for cat, n in data.get("categories", {}).items():
            report.categories[cat] = int(n)
        return report


@dataclass
class RunContext:
    """Per-question sinks shared by the gateway and pruners during one run."""

    ledger: CallLedger = field(default_factory=CallLedger)
    exchanges: list[ChatExchange] = field(default_factory=list)
    cleaning: CleaningReport = field(default_factory=CleaningReport)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record_exchange(self, exchange: ChatExchange) -> None:
        with self._lock:
            self.exchanges.append(exchange)


# --------------------------------------------------------------------------
# Templates and rendering

_template_cache: dict[str, str] = {}


def load_template(name: str) -> str:
    if name not in _template_cache:
        path = resources.files("kgbeam").joinpath("templates", TEMPLATE_VERSION, f"{name}.txt")
        _template_cache[name] = path.read_text(encoding="utf-8")
    return _template_cache[name]


def _render(name: str, **slots: str) -> str:
    return Template(load_template(name)).substitute(**slots)


def render_relation_prompt(question: str, entity_label: str, relations: list[str], constrained: bool = True) -> str:
    name = "relation_prune_constrained" if constrained else "relation_prune_unconstrained"
    return _render(name, question=question, entity=entity_label, relations="; ".join(relations))


def render_entity_prompt(question: str, relation: str, entity_names: list[str], constrained: bool = True) -> str:
    name = "entity_prune_constrained" if constrained else "entity_prune_unconstrained"
    return _render(name, question=question, relation=relation, entities="; ".join(entity_names))


def format_triplets(triplets: list[tuple[str, str, str]]) -> str:
    """Render (head, relation, tail) rows as parenthesized quoted triplets."""
    return "\n".join(f"('{h}', '{r}', '{t}')" for h, r, t in triplets)


def render_sufficiency_prompt(question: str, triplets: list[tuple[str, str, str]]) -> str:
    return _render("sufficiency", question=question, triplets=format_triplets(triplets))


def render_answer_prompt(question: str, triplets: list[tuple[str, str, str]]) -> str:
    return _render("answer", question=question, triplets=format_triplets(triplets))


def render_direct_answer_prompt(question: str) -> str:
    return _render("direct_answer", question=question)


def render_topic_extract_prompt(question: str) -> str:
    return _render("topic_extract", question=question)


# --------------------------------------------------------------------------
# Reply parsing

_FENCE_RE = re.compile(r"^\s*```[a-zA-Z0-9_-]*\s*$", re.MULTILINE)
_TRAILING_COMMA_RE = re.compile(r",\s*([}\]])")
_SCORE_BRACE_RE = re.compile(r"\{\s*([^{}()\n]+?)\s*\(Score:\s*([0-9]*\.?[0-9]+)\)+\s*\}")


def extract_json_object(text: str) -> str | None:
    """Return the first balanced ``{...}`` region, tolerating surrounding prose."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if escaped:
                escaped = False
                continue
            if ch == "\\" and in_string:
                escaped = True
                continue
            if ch == '"':
                in_string = not in_string
                continue
            if in_string:
                continue
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start : i + 1]
        start = text.find("{", start + 1)
    return None


def _load_object(text: str) -> dict | None:
    region = extract_json_object(text)
    if region is None:
        return None
    try:
        obj = json.loads(region)
    except json.JSONDecodeError:
        return None
    return obj if isinstance(obj, dict) else None


_KIND_KEYS = {"relation": "relations", "entity": "entities"}
_NAME_KEYS = ("relation", "name", "entity")


def parse_scored_json(reply: str, kind: str) -> tuple[list[tuple[str, float]], CleaningReport]:
    """Parse a scored-candidate reply into (name, score) pairs.

    Tries the first balanced JSON object, then a repair pass (strip markdown
    fences, drop trailing commas), then a brace-notation salvage for
    unconstrained-style replies.  Returns the pairs plus a one-output
    CleaningReport delta; raises OutputParseError when nothing is usable.
    """
    if kind not in _KIND_KEYS:
        raise ValueError(f"kind must be 'relation' or 'entity', got {kind!r}")
    categories: list[str] = []

    obj = _load_object(reply)
    if obj is None:
        repaired = _FENCE_RE.sub("", reply)
        repaired = _TRAILING_COMMA_RE.sub(r"\1", repaired)
        obj = _load_object(repaired)

    if obj is not None:
        expected = _KIND_KEYS[kind]
        items = obj.get(expected)
        if not isinstance(items, list):
            other = _KIND_KEYS["entity" if kind == "relation" else "relation"]
            items = obj.get(other)
            if isinstance(items, list):
                categories.append("schema_mismatch")
        if isinstance(items, list):
            pairs: list[tuple[str, float]] = []
            for item in items:
                if not isinstance(item, dict):
                    if "schema_mismatch" not in categories:
                        categories.append("schema_mismatch")
                    continue
                name = next((item[k] for k in _NAME_KEYS if isinstance(item.get(k), str)), None)
                if name is None:
                    if "schema_mismatch" not in categories:
                        categories.append("schema_mismatch")
                    continue
                score = item.get("score")
                if isinstance(score, bool) or not isinstance(score, (int, float)):
                    try:
                        score = float(score)
                    except (TypeError, ValueError):
                        if "score_not_numeric" not in categories:
                            categories.append("score_not_numeric")
                        continue
                pairs.append((name, float(score)))
            if pairs:
                delta = CleaningReport()
                delta.record(failed=False, categories=tuple(categories))
                return pairs, delta
            failure = tuple(categories) or ("schema_mismatch",)
            delta = CleaningReport()
            delta.record(failed=True, categories=failure)
            raise _parse_error(reply, failure, delta)
        failure = tuple(dict.fromkeys(categories + ["schema_mismatch"]))
        delta = CleaningReport()
        delta.record(failed=True, categories=failure)
        raise _parse_error(reply, failure, delta)

    # No JSON object anywhere: salvage "{name (Score: x)}" brace notation.
    salvaged = [(m.group(1).strip(), float(m.group(2))) for m in _SCORE_BRACE_RE.finditer(reply)]
    salvaged = [(name, score) for name, score in salvaged if name]
    if salvaged:
        delta = CleaningReport()
        delta.record(failed=False)
        return salvaged, delta
    delta = CleaningReport()
    delta.record(failed=True, categories=("not_json",))
    raise _parse_error(reply, ("not_json",), delta)


def _parse_error(reply: str, categories: tuple[str, ...], delta: CleaningReport) -> OutputParseError:
    err = OutputParseError(
        f"could not parse scored candidates (categories: {', '.join(categories)})",
        raw_reply=reply,
        categories=categories,
    )
    err.report = delta
    return err


_BRACED_SPAN_RE = re.compile(r"\{([^{}]*)\}")


def extract_final_answer(reply: str, mode: str = "braces") -> str:
    """Pull the final answer out of a generation.

    ``braces``: first ``{...}`` span, falling back to the first non-empty
    line; ``first_line``: first non-empty line; ``raw``: reply unchanged.
    """
    if mode == "raw":
        return reply
    if mode == "braces":
        m = _BRACED_SPAN_RE.search(reply)
        if m and m.group(1).strip():
            return m.group(1).strip()
    for line in reply.splitlines():
        if line.strip():
            return line.strip()
    return reply.strip()


# --------------------------------------------------------------------------
# Gateways


class ChatGateway:
    """Base gateway: records exchanges, counts calls; transport is abstract."""

    def __init__(self, params: GenerationParams, temperature_by_purpose: dict[str, float] | None = None):
        self.params = params
        self.temperature_by_purpose = dict(temperature_by_purpose or {})

    def chat(self, prompt: str, purpose: str, ctx: RunContext | None = None) -> str:
        if purpose not in PURPOSES:
            raise ValueError(f"unknown call purpose: {purpose!r}")
        temperature = self.temperature_by_purpose.get(purpose, self.params.temperature)
        start = time.monotonic()
        reply, attempts, usage = self._send(prompt, temperature)
        latency_ms = (time.monotonic() - start) * 1000.0
        if ctx is not None:
            ctx.ledger.increment(purpose)
            ctx.record_exchange(
                ChatExchange(
                    purpose=purpose,
                    prompt=prompt,
                    model=self.params.model,
                    temperature=temperature,
                    max_tokens=self.params.max_tokens,
                    reply=reply,
                    latency_ms=latency_ms,
                    attempts=attempts,
                    token_usage=usage,
                )
            )
        return reply

    def _send(self, prompt: str, temperature: float) -> tuple[str, int, dict | None]:
        raise NotImplementedError


class OpenAIChatGateway(ChatGateway):
    """OpenAI-compatible chat completions over HTTP with retry/backoff.

    Transient failures (connection errors, 429, 5xx) are retried up to
    ``retries`` times past the first attempt; other non-2xx statuses raise
    immediately.
    """

    def __init__(
        self,
        endpoint: str,
        params: GenerationParams,
        api_key: str | None = None,
        api_key_env: str = "OPENAI_API_KEY",
        retries: int = 2,
        backoff_base: float = 0.5,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        temperature_by_purpose: dict[str, float] | None = None,
        session: requests.Session | None = None,
    ):
        super().__init__(params, temperature_by_purpose)
        base = endpoint.rstrip("/")
        if not base.endswith("/chat/completions"):
            base = base + "/v1/chat/completions"
        self.url = base
        self.api_key = api_key if api_key is not None else os.environ.get(api_key_env)
        self.retries = retries
        self.backoff_base = backoff_base
        self.timeout = timeout
        self._session = session or requests.Session()
        self._gate = threading.Semaphore(max_in_flight)

    def _send(self, prompt: str, temperature: float) -> tuple[str, int, dict | None]:
        payload = {
            "model": self.params.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": self.params.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        attempts = 0
        last_exc: Exception | None = None
        while attempts <= self.retries:
            attempts += 1
            try:
                with self._gate:
                    resp = self._session.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                if attempts <= self.retries:
                    time.sleep(self.backoff_base * (2 ** (attempts - 1)))
                continue
            if resp.status_code == 200:
                try:
                    body = resp.json()
                    reply = body["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise ApiError("malformed chat completion response", 200, resp.text) from exc
                return reply, attempts, body.get("usage")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_exc = ApiError("retryable chat failure", resp.status_code, resp.text)
                if attempts <= self.retries:
                    time.sleep(self.backoff_base * (2 ** (attempts - 1)))
                continue
            raise ApiError("chat endpoint rejected the request", resp.status_code, resp.text)
        raise TransportError(f"chat endpoint unreachable: {last_exc}", attempts=attempts)


class ScriptedGateway(ChatGateway):
    """In-process gateway replying from a function or a fixed reply queue."""

    def __init__(self, script, params: GenerationParams | None = None):
        super().__init__(params or GenerationParams(model="scripted"))
        if callable(script):
            self._fn = script
        else:
            replies = list(script)

            def _fn(prompt: str, _replies=replies) -> str:
                if not _replies:
                    raise RuntimeError("scripted gateway ran out of replies")
                return _replies.pop(0)

            self._fn = _fn

    def _send(self, prompt: str, temperature: float) -> tuple[str, int, dict | None]:
        return self._fn(prompt), 1, None
