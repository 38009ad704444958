"""Deterministic offline chat model for dry runs and tests.

Synthesizes replies to this package's own prompt templates from the prompt
text alone: candidate scoring by token overlap with the question, sufficiency
verdicts and answers by chaining the supplied knowledge triplets.  It holds
no state and consults nothing outside the prompt, so batch runs against it
are exactly reproducible.
"""

from __future__ import annotations

import json
import re

from .pruning import tokenize

# Question scaffolding that should not count as evidence-bearing content.
STOPWORDS = frozenset(
    """a an the of in on at by with for to from and or is are was were be been
    does do did what which who whom whose where when how why type kind sort
    form name named used uses use using it its this that these those many much
    s t""".split()
)


def _content_tokens(text: str) -> set[str]:
    return {t for t in tokenize(text) if t not in STOPWORDS}


def _last_field(prompt: str, marker: str) -> str:
    idx = prompt.rfind(marker)
    if idx == -1:
        return ""
    rest = prompt[idx + len(marker):]
    return rest.split("\n", 1)[0].strip()


_TRIPLET_RE = re.compile(r"\('(.*?)', '(.*?)', '(.*?)'\)")


def _triplets(prompt: str) -> list[tuple[str, str, str]]:
    idx = prompt.rfind("Knowledge Triplets:")
    return _TRIPLET_RE.findall(prompt[idx:] if idx != -1 else prompt)


def _overlap(question_tokens: set[str], candidate: str) -> int:
    return len(question_tokens & set(tokenize(candidate)))


class HeuristicChatModel:
    """Callable prompt -> reply; recognizes each template by its instruction line."""

    def __call__(self, prompt: str) -> str:
        return self.reply(prompt)

    def reply(self, prompt: str) -> str:
        head = prompt.lstrip().splitlines()[0] if prompt.strip() else ""
        if head.startswith("Please retrieve"):
            return self._score_relations(prompt, constrained="JSON" in head)
        if head.startswith("Please score"):
            return self._score_entities(prompt, constrained="JSON" in head)
        if "whether it's sufficient" in head:
            return self._sufficiency(prompt)
        if "answer the question with these triplets" in head:
            return self._answer(prompt)
        if head.startswith("Answer the following question"):
            return "I do not have enough information to answer this question."
        if head.startswith("List the topic entities"):
            return ""
        return "I cannot answer"

    # -- candidate scoring

    def _score_relations(self, prompt: str, constrained: bool) -> str:
        question = _last_field(prompt, "\nQ: ")
        candidates = [c.strip() for c in _last_field(prompt, "\nRelations: ").split(";") if c.strip()]
        if not candidates:
            return "{}"
        q_tokens = _content_tokens(question)
        weights = [_overlap(q_tokens, c) for c in candidates]
        order = sorted(range(len(candidates)), key=lambda i: (-weights[i], i))[:3]
        kept = [(candidates[i], weights[i]) for i in order]
        total = sum(w for _, w in kept)
        if total == 0:
            scored = [(name, 1.0 / len(kept)) for name, _ in kept]
        else:
            scored = [(name, w / total) for name, w in kept]
        if constrained:
            payload = {
                "relations": [
                    {"relation": name, "score": score, "description": "token overlap with the question"}
                    for name, score in scored
                ]
            }
            return json.dumps(payload, indent=2)
        lines = [
            f"{i}. {{{name} (Score: {score})}}: token overlap with the question."
            for i, (name, score) in enumerate(scored, start=1)
        ]
        return "\n".join(lines)

    def _score_entities(self, prompt: str, constrained: bool) -> str:
        question = _last_field(prompt, "\nQ: ")
        candidates = [c.strip() for c in _last_field(prompt, "\nEntities: ").split(";") if c.strip()]
        if not candidates:
            return "{}"
        q_tokens = _content_tokens(question)
        weights = [_overlap(q_tokens, c) for c in candidates]
        total = sum(weights)
        if total == 0:
            scored = [(name, 1.0 / len(candidates)) for name in candidates]
        else:
            scored = [(name, w / total) for name, w in zip(candidates, weights)]
        if constrained:
            payload = {"entities": [{"name": name, "score": score} for name, score in scored]}
            return json.dumps(payload, indent=2)
        return "Score: " + ", ".join(str(score) for _, score in scored)

    # -- reasoning over triplets

    def _best_chain(self, prompt: str) -> tuple[list[tuple[str, str, str]], bool]:
        """Greedy chain over context triplets; returns (chain, covers_question)."""
        question = _last_field(prompt, "\nQ: ")
        triples = _triplets(prompt)
        q_tokens = _content_tokens(question)

        starts = [h for h, _, _ in triples if _content_tokens(h) and _content_tokens(h) <= q_tokens]
        best: list[tuple[str, str, str]] = []
        best_consumed: set[str] = set()
        seen_starts = []
        for start in starts:
            if start in seen_starts:
                continue
            seen_starts.append(start)
            chain: list[tuple[str, str, str]] = []
            consumed = _content_tokens(start)
            frontier = start
            visited = {start}
            while True:
                step = None
                for h, r, t in triples:
                    if h != frontier or t in visited:
                        continue
                    rel_tokens = _content_tokens(r)
                    if rel_tokens & q_tokens:
                        step = (h, r, t)
                        break
                if step is None:
                    break
                chain.append(step)
                consumed |= _content_tokens(step[1]) & q_tokens
                visited.add(step[2])
                frontier = step[2]
            if len(consumed) > len(best_consumed) or (
                len(consumed) == len(best_consumed) and len(chain) > len(best)
            ):
                best = chain
                best_consumed = consumed
        required = {t for t in q_tokens if not any(t in _content_tokens(h) for h, _, _ in triples)}
        covered = bool(best) and required <= best_consumed
        return best, covered

    def _sufficiency(self, prompt: str) -> str:
        chain, covered = self._best_chain(prompt)
        if chain and covered:
            return "{Yes}. The triplets trace a complete path for the question."
        return "{No}. The triplets do not cover every part of the question."

    def _answer(self, prompt: str) -> str:
        chain, covered = self._best_chain(prompt)
        if chain and covered:
            return (
                "Based on the given knowledge triplets, the answer is "
                + "{" + chain[-1][2] + "}."
            )
        return "The triplets do not provide enough information to answer this question."
