"""Candidate-scoring strategies for knowledge-graph exploration.

Given a question and a small candidate list (relation names or entity names),
each strategy assigns relevance scores; ``top_k`` then keeps the best.  Three
strategies mirror the usual trade-offs: Okapi BM25 over the candidate list
treated as a tiny corpus, dense dot-product scoring through an embedding
client, and prompted scoring through a chat model with constrained JSON
output.  Oracle and seeded-random pruners exist for debugging and baselines.
"""

from __future__ import annotations

import math
import random
import re
import threading
from dataclasses import dataclass

from .errors import ContractViolation, OutputParseError, PrunerError
from . import llm
from .llm import CleaningReport, RunContext

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumerics (this also splits '.' and '_')."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class ScoredCandidate:
    text: str
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ContractViolation(f"score for {self.text!r} is not finite")


@dataclass
class ScoreDistribution:
    """Scores aligned with the input candidate order.

    When ``normalized`` is set, scores are non-negative and sum to 1.
    ``pre_normalization_sum`` preserves what the model originally said its
    scores summed to; ``cleaning`` carries any parse defects observed.
    """

    items: list[ScoredCandidate]
    normalized: bool = False
    pre_normalization_sum: float | None = None
    cleaning: CleaningReport | None = None

    def __post_init__(self):
        if self.normalized and self.items:
            total = sum(c.score for c in self.items)
            if any(c.score < 0 for c in self.items) or abs(total - 1.0) > 1e-6:
                raise ContractViolation(f"distribution marked normalized but sums to {total}")

    def scores(self) -> list[float]:
        return [c.score for c in self.items]


@dataclass(frozen=True)
class PrunerConfig:
    k: int = 3
    strategy: str = "bm25"  # lm | bm25 | dense | oracle | random
    k1: float = 1.5
    b: float = 0.75
    dense_endpoint: str | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ContractViolation("top-k width must be >= 1")
        if self.k1 <= 0:
            raise ContractViolation("BM25 k1 must be > 0")
        if not 0.0 <= self.b <= 1.0:
            raise ContractViolation("BM25 b must be in [0, 1]")


@dataclass(frozen=True)
class PruneRequest:
    """One scoring request: candidates are pre-rendered display strings."""

    question_id: str
    question: str
    context: str  # frontier entity label (relation stage) or relation names (entity stage)
    candidates: tuple[str, ...]
    kind: str  # "relation" | "entity"


# --------------------------------------------------------------------------
# Scoring functions


def bm25_score(
    query_tokens: list[str],
    candidates: list[str],
    k1: float = 1.5,
    b: float = 0.75,
) -> ScoreDistribution:
    """Okapi BM25 where the candidate list itself is the corpus.

    idf(t) = ln((N - n_t + 0.5) / (n_t + 0.5) + 1) with N = len(candidates)
    and n_t = number of candidates containing t; the +1 keeps idf positive.
    """
    if not candidates:
        raise ContractViolation("bm25_score requires a non-empty candidate list")
    docs = [tokenize(c) for c in candidates]
    n_docs = len(docs)
    avgdl = sum(len(d) for d in docs) / n_docs
    if avgdl == 0:
        avgdl = 1.0
    freqs = [{t: d.count(t) for t in set(d)} for d in docs]

    items = []
    for doc, tf in zip(docs, freqs):
        norm = k1 * (1.0 - b + b * len(doc) / avgdl)
        score = 0.0
        for term in query_tokens:
            f = tf.get(term, 0)
            if f == 0:
                continue
            n_t = sum(1 for other in freqs if term in other)
            idf = math.log((n_docs - n_t + 0.5) / (n_t + 0.5) + 1.0)
            score += idf * f * (k1 + 1.0) / (f + norm)
        items.append(score)
    return ScoreDistribution([ScoredCandidate(c, s) for c, s in zip(candidates, items)])


def dense_score(question: str, candidates: list[str], embedder) -> ScoreDistribution:
    """Dot product between the question embedding and each candidate embedding.

    One batched embedding request covers the question plus all candidates.
    """
    if not candidates:
        raise ContractViolation("dense_score requires a non-empty candidate list")
    vectors = embedder.embed([question] + list(candidates))
    if getattr(vectors, "ndim", None) != 2 or vectors.shape[0] != len(candidates) + 1:
        raise ContractViolation("embedding client returned a malformed batch")
    q_vec = vectors[0]
    scores = vectors[1:] @ q_vec
    return ScoreDistribution([ScoredCandidate(c, float(s)) for c, s in zip(candidates, scores)])


def lm_score(
    question: str,
    context: str,
    candidates: list[str],
    kind: str,
    gateway: llm.ChatGateway,
    ctx: RunContext | None = None,
    constrained: bool = True,
    fallback: str = "uniform",
) -> ScoreDistribution:
    """Prompt the chat model to score candidates and renormalize its reply.

    Parsed names map back to candidates exactly, then case-insensitively;
    unmentioned candidates score 0.  On an unparseable reply the behavior
    follows ``fallback``: "uniform" degrades to 1/n scores, "error" raises
    PrunerError with the raw reply attached.
    """
    if not candidates:
        raise ContractViolation("lm_score requires a non-empty candidate list")
    if kind == "relation":
        prompt = llm.render_relation_prompt(question, context, list(candidates), constrained)
        purpose = "relation_prune"
    elif kind == "entity":
        prompt = llm.render_entity_prompt(question, context, list(candidates), constrained)
        purpose = "entity_prune"
    else:
        raise ValueError(f"kind must be 'relation' or 'entity', got {kind!r}")

    reply = gateway.chat(prompt, purpose, ctx)
    cleaning = CleaningReport()
    pairs: list[tuple[str, float]] = []
    positional: list[float] | None = None
    try:
        pairs, delta = llm.parse_scored_json(reply, kind)
    except OutputParseError as exc:
        positional = _positional_scores(reply, len(candidates)) if kind == "entity" else None
        if positional is None:
            cleaning.merge(exc.report)
            if ctx is not None:
                ctx.cleaning.merge(exc.report)
            if fallback == "uniform":
                n = len(candidates)
                return ScoreDistribution(
                    [ScoredCandidate(c, 1.0 / n) for c in candidates],
                    normalized=True,
                    cleaning=cleaning,
                )
            raise PrunerError(f"lm pruner could not parse reply: {exc}", raw_reply=reply) from exc
        delta = CleaningReport()
        delta.record(failed=False)

    cleaning.merge(delta)
    if ctx is not None:
        ctx.cleaning.merge(delta)

    if positional is not None:
        scores = [max(s, 0.0) for s in positional]
    else:
        scores = [0.0] * len(candidates)
        exact = {c: i for i, c in reversed(list(enumerate(candidates)))}
        folded = {c.casefold(): i for i, c in reversed(list(enumerate(candidates)))}
        unmatched = False
        for name, score in pairs:
            idx = exact.get(name)
            if idx is None:
                idx = folded.get(name.casefold())
            if idx is None:
                unmatched = True
                continue
            scores[idx] = max(score, 0.0)
        if unmatched:
            cleaning.add_category("name_unmatched")
            if ctx is not None:
                ctx.cleaning.add_category("name_unmatched")

    total = sum(scores)
    if total <= 0:
        n = len(candidates)
        normalized = [1.0 / n] * n
    else:
        normalized = [s / total for s in scores]
    return ScoreDistribution(
        [ScoredCandidate(c, s) for c, s in zip(candidates, normalized)],
        normalized=True,
        pre_normalization_sum=total,
        cleaning=cleaning,
    )


_FLOAT_RE = re.compile(r"\d+\.\d+|\d+")


def _positional_scores(reply: str, n: int) -> list[float] | None:
    """Salvage an unconstrained entity reply: a bare row of scores in candidate order."""
    first_line = next((ln for ln in reply.splitlines() if ln.strip()), "")
    numbers = _FLOAT_RE.findall(first_line.split(":", 1)[-1] if ":" in first_line else first_line)
    if len(numbers) != n:
        numbers = _FLOAT_RE.findall(reply)
        if len(numbers) != n:
            return None
    return [float(x) for x in numbers]


def top_k(dist: ScoreDistribution, k: int) -> list[ScoredCandidate]:
    """The min(k, n) highest-scoring candidates; ties keep input order."""
    if k < 0:
        raise ContractViolation("k must be >= 0")
    order = sorted(range(len(dist.items)), key=lambda i: (-dist.items[i].score, i))
    return [dist.items[i] for i in order[:k]]


# --------------------------------------------------------------------------
# Pruner objects (uniform interface used by the traversal loop)


class BM25Pruner:
    name = "bm25"

    def __init__(self, k1: float = 1.5, b: float = 0.75):
        self.k1 = k1
        self.b = b

    def score(self, request: PruneRequest, ctx: RunContext | None = None) -> ScoreDistribution:
        return bm25_score(tokenize(request.question), list(request.candidates), self.k1, self.b)


class DensePruner:
    name = "dense"

    def __init__(self, embedder):
        self.embedder = embedder

    def score(self, request: PruneRequest, ctx: RunContext | None = None) -> ScoreDistribution:
        return dense_score(request.question, list(request.candidates), self.embedder)


class LMPruner:
    name = "lm"

    def __init__(self, gateway: llm.ChatGateway, constrained: bool = True, fallback: str = "uniform"):
        if fallback not in ("uniform", "error"):
            raise ValueError("fallback must be 'uniform' or 'error'")
        self.gateway = gateway
        self.constrained = constrained
        self.fallback = fallback

    def score(self, request: PruneRequest, ctx: RunContext | None = None) -> ScoreDistribution:
        return lm_score(
            request.question,
            request.context,
            list(request.candidates),
            request.kind,
            self.gateway,
            ctx=ctx,
            constrained=self.constrained,
            fallback=self.fallback,
        )


class OraclePruner:
    """Scores 1.0 for candidates listed as gold for the question, else 0."""

    name = "oracle"

    def __init__(self, gold: dict[str, dict[str, list[str]]]):
        self._gold = {
            qid: {
                "relation": {str(x) for x in spec.get("relations", ())},
                "entity": {str(x) for x in spec.get("entities", ())},
            }
            for qid, spec in gold.items()
        }

    def score(self, request: PruneRequest, ctx: RunContext | None = None) -> ScoreDistribution:
        gold = self._gold.get(request.question_id, {}).get(request.kind, set())
        return ScoreDistribution(
            [ScoredCandidate(c, 1.0 if c in gold else 0.0) for c in request.candidates]
        )


class RandomPruner:
    """Seeded random scores; a floor baseline, deterministic per construction."""

    name = "random"

    def __init__(self, seed: int = 0):
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    def score(self, request: PruneRequest, ctx: RunContext | None = None) -> ScoreDistribution:
        with self._lock:
            return ScoreDistribution(
                [ScoredCandidate(c, self._rng.random()) for c in request.candidates]
            )


@dataclass
class PrunerPair:
    """Pruner selection per traversal stage."""

    relation: object
    entity: object

    @classmethod
    def of(cls, pruner) -> "PrunerPair":
        return cls(relation=pruner, entity=pruner)
