"""Depth-bounded beam search over the knowledge graph.

One question runs as: root a path per topic entity, then up to ``max_depth``
expansion rounds.  Each round scores candidate relations at every live
frontier (one pruner call per path), gathers neighbor entities under the kept
relations, scores them (one pruner call per path), forms child paths with
multiplicative score accumulation, and cuts the pool back to the beam width.
After each round an optional sufficiency check may stop early; the final
answer is generated from the collected triplets, or from the model's own
knowledge when the beam died or the evidence never sufficed.
"""

from __future__ import annotations

import datetime as _dt
import re
import time
from dataclasses import dataclass, field

from . import llm
from .errors import InitializationError, KgbeamError
from .kg import Direction, EntityRef, Relation
from .pruning import PruneRequest, PrunerPair, top_k

ANSWER_MODE_GROUNDED = "kg_grounded"
ANSWER_MODE_PARAMETRIC = "fallback_parametric"
ANSWER_MODE_ERROR = "error"


@dataclass(frozen=True)
class ReasoningPath:
    """A chain of hops rooted at a topic entity."""

    origin: EntityRef
    steps: tuple[tuple[Relation, EntityRef], ...] = ()
    score: float = 1.0
    dead: bool = False

    @property
    def frontier(self) -> EntityRef:
        return self.steps[-1][1] if self.steps else self.origin

    def entity_ids(self) -> set[str]:
        ids = {self.origin.id}
        ids.update(entity.id for _, entity in self.steps)
        return ids

    def extend(self, relation: Relation, entity: EntityRef, factor: float) -> "ReasoningPath":
        return ReasoningPath(self.origin, self.steps + ((relation, entity),), self.score * factor)

    def triples(self) -> list[tuple[str, str, str]]:
        """Hops as display triples, incoming hops flipped back to storage order."""
        out = []
        current = self.origin
        for relation, entity in self.steps:
            if relation.direction is Direction.OUTGOING:
                out.append((current.display, relation.name, entity.display))
            else:
                out.append((entity.display, relation.name, current.display))
            current = entity
        return out

    def as_dict(self) -> dict:
        return {
            "origin": {"id": self.origin.id, "label": self.origin.label},
            "steps": [
                {
                    "relation": rel.name,
                    "direction": rel.direction.value,
                    "entity": {"id": ent.id, "label": ent.label},
                }
                for rel, ent in self.steps
            ],
            "score": self.score,
            "dead": self.dead,
        }


@dataclass
class TraversalConfig:
    beam_width: int = 3
    max_depth: int = 3
    relation_k: int = 3
    entity_k: int = 3
    sufficiency_check: bool = True
    include_incoming: bool = True
    entity_candidate_cap: int = 200
    score_with_path_context: bool = False
    relation_render: str = "full"  # full | last_segment
    answer_extraction: str = "braces"  # braces | first_line | raw
    topic_extract_fallback: bool = False

    def __post_init__(self):
        for name in ("beam_width", "max_depth", "relation_k", "entity_k", "entity_candidate_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class StageTrace:
    """One pruning decision: the candidate set seen and the subset kept."""

    depth: int
    stage: str  # "relation" | "entity"
    path_index: int
    pruner: str
    candidates: list[dict]  # [{"text": ..., "score": ...}]
    kept: list[str]
    pre_normalization_sum: float | None = None
    note: str | None = None

    def as_dict(self) -> dict:
        return {
            "depth": self.depth,
            "stage": self.stage,
            "path_index": self.path_index,
            "pruner": self.pruner,
            "candidates": self.candidates,
            "kept": self.kept,
            "pre_normalization_sum": self.pre_normalization_sum,
            "note": self.note,
        }


@dataclass
class TraceRecord:
    """Full per-question log of exploration, calls, and the outcome."""

    question_id: str
    question: str
    steps: list[StageTrace] = field(default_factory=list)
    ledger: dict = field(default_factory=dict)
    cleaning: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    answer: str = ""
    raw_answer: str = ""
    answer_mode: str = ""
    paths: list[dict] = field(default_factory=list)
    dead_topic_entities: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    error: dict | None = None

    def as_dict(self) -> dict:
        return {
            "record": "question",
            "question_id": self.question_id,
            "question": self.question,
            "steps": [s.as_dict() for s in self.steps],
            "ledger": self.ledger,
            "cleaning": self.cleaning,
            "timings": self.timings,
            "answer": self.answer,
            "raw_answer": self.raw_answer,
            "answer_mode": self.answer_mode,
            "paths": self.paths,
            "dead_topic_entities": self.dead_topic_entities,
            "notes": self.notes,
            "error": self.error,
        }


@dataclass
class TraversalOutcome:
    answer: str
    raw_answer: str
    mode: str
    paths: list[ReasoningPath]
    trace: TraceRecord

    def __post_init__(self):
        if self.mode == ANSWER_MODE_GROUNDED and not any(p.steps for p in self.paths):
            raise KgbeamError("kg_grounded outcome requires at least one non-empty path")


# --------------------------------------------------------------------------
# Stages


def initialize(question, kg, gateway=None, ctx=None, topic_extract_fallback: bool = False) -> list[ReasoningPath]:
    """One zero-step path per topic entity; entities absent from the KG are
    flagged dead so they are recorded but never expanded."""
    topics = list(question.topic_entities)
    if not topics and topic_extract_fallback and gateway is not None:
        prompt = llm.render_topic_extract_prompt(question.question)
        reply = gateway.chat(prompt, "topic_extract", ctx)
        for raw in re.split(r"[;\n]", reply):
            label = raw.strip().strip(".")
            if not label:
                continue
            found = getattr(kg, "lookup_by_label", lambda _: [])(label)
            topics.extend(found)
    if not topics:
        raise InitializationError(f"question {question.id!r} has no topic entities")
    paths = []
    for entity in topics:
        label = entity.label or kg.resolve_label(entity.id)
        ref = EntityRef(entity.id, label)
        dead = not kg.relation_search(ref)
        paths.append(ReasoningPath(origin=ref, dead=dead))
    return paths


def _render_relation(name: str, mode: str) -> str:
    return name.rsplit(".", 1)[-1] if mode == "last_segment" else name


def _query_text(question, path: ReasoningPath, config: TraversalConfig) -> str:
    if not config.score_with_path_context or not path.steps:
        return question.question
    context = "; ".join(f"{h} {r} {t}" for h, r, t in path.triples())
    return f"{question.question} [path so far: {context}]"


def expand_step(
    paths: list[ReasoningPath],
    question,
    kg,
    pruners: PrunerPair,
    config: TraversalConfig,
    depth: int,
    ctx=None,
) -> tuple[list[ReasoningPath], list[StageTrace]]:
    """One beam-search round over all live paths.

    Per path: one relation-pruning call over the frontier's incident relation
    names, then one entity-pruning call over the pooled neighbors of the kept
    relations.  Entity top-k applies per (path, relation) group; the global
    cut to the beam width happens across all children at the end.
    """
    traces: list[StageTrace] = []
    children: list[ReasoningPath] = []

    for path_index, path in enumerate(paths):
        if path.dead:
            continue
        frontier = path.frontier
        direction_filter = None if config.include_incoming else Direction.OUTGOING
        relations = kg.relation_search(frontier, direction_filter)
        if not relations:
            traces.append(
                StageTrace(depth, "relation", path_index, pruners.relation.name, [], [], note="dead frontier")
            )
            continue

        # Group by name: the same name may be incident in both directions but
        # is scored once; a kept name expands through every tagged direction.
        directions_by_name: dict[str, list[Direction]] = {}
        for rel in relations:
            directions_by_name.setdefault(rel.name, []).append(rel.direction)
        names = list(directions_by_name)
        rendered = [_render_relation(n, config.relation_render) for n in names]

        request = PruneRequest(
            question_id=question.id,
            question=_query_text(question, path, config),
            context=frontier.display,
            candidates=tuple(rendered),
            kind="relation",
        )
        rel_dist = pruners.relation.score(request, ctx)
        kept_rel = top_k(rel_dist, config.relation_k)
        rendered_to_name = dict(zip(rendered, names))
        kept_names = [rendered_to_name[c.text] for c in kept_rel]
        traces.append(
            StageTrace(
                depth,
                "relation",
                path_index,
                pruners.relation.name,
                [{"text": c.text, "score": c.score} for c in rel_dist.items],
                [c.text for c in kept_rel],
                pre_normalization_sum=rel_dist.pre_normalization_sum,
            )
        )

        # Pool candidate entities across the kept relations.
        pooled: list[tuple[str, Direction, EntityRef, float]] = []
        for cand in kept_rel:
            name = rendered_to_name[cand.text]
            for direction in directions_by_name[name]:
                neighbors = kg.entity_search(frontier, Relation(name, direction))
                if len(neighbors) > config.entity_candidate_cap:
                    neighbors = sorted(neighbors, key=lambda e: e.display)[: config.entity_candidate_cap]
                pooled.extend((name, direction, nb, cand.score) for nb in neighbors)
        if not pooled:
            traces.append(
                StageTrace(depth, "entity", path_index, pruners.entity.name, [], [], note="no neighbor entities")
            )
            continue

        entity_texts: list[str] = []
        for _, _, nb, _ in pooled:
            if nb.display not in entity_texts:
                entity_texts.append(nb.display)
        request = PruneRequest(
            question_id=question.id,
            question=_query_text(question, path, config),
            context="; ".join(kept_names),
            candidates=tuple(entity_texts),
            kind="entity",
        )
        ent_dist = pruners.entity.score(request, ctx)
        score_by_text = {c.text: c.score for c in ent_dist.items}

        kept_entity_texts: list[str] = []
        path_ids = path.entity_ids()
        groups: dict[tuple[str, Direction], list[tuple[EntityRef, float]]] = {}
        for name, direction, nb, rel_score in pooled:
            groups.setdefault((name, direction), []).append((nb, rel_score))
        for (name, direction), members in groups.items():
            ranked = sorted(
                range(len(members)),
                key=lambda i: (-score_by_text.get(members[i][0].display, 0.0), i),
            )
            taken = 0
            for i in ranked:
                if taken >= config.entity_k:
                    break
                entity, rel_score = members[i]
                if entity.id in path_ids:
                    continue  # cycles add no evidence
                ent_score = score_by_text.get(entity.display, 0.0)
                children.append(path.extend(Relation(name, direction), entity, rel_score * ent_score))
                if entity.display not in kept_entity_texts:
                    kept_entity_texts.append(entity.display)
                taken += 1
        traces.append(
            StageTrace(
                depth,
                "entity",
                path_index,
                pruners.entity.name,
                [{"text": c.text, "score": c.score} for c in ent_dist.items],
                kept_entity_texts,
                pre_normalization_sum=ent_dist.pre_normalization_sum,
            )
        )

    order = sorted(range(len(children)), key=lambda i: (-children[i].score, i))
    beam = [children[i] for i in order[: config.beam_width]]
    return beam, traces


def _collected_triples(paths: list[ReasoningPath]) -> list[tuple[str, str, str]]:
    seen: list[tuple[str, str, str]] = []
    for path in paths:
        for triple in path.triples():
            if triple not in seen:
                seen.append(triple)
    return seen


_VERDICT_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def check_sufficiency(question, paths: list[ReasoningPath], gateway, ctx=None) -> tuple[bool, str | None]:
    """Ask the model whether the collected triplets answer the question.

    Lenient verdict parsing: the first standalone yes/no token decides; an
    unreadable verdict counts as "no" and is noted.
    """
    prompt = llm.render_sufficiency_prompt(question.question, _collected_triples(paths))
    reply = gateway.chat(prompt, "sufficiency", ctx)
    match = _VERDICT_RE.search(reply)
    if match is None:
        return False, "unparseable sufficiency verdict"
    return match.group(1).lower() == "yes", None


def answer(question, paths: list[ReasoningPath], gateway, config: TraversalConfig, ctx=None) -> tuple[str, str, str]:
    """Generate the final answer; returns (extracted, raw reply, mode)."""
    grounded = [p for p in paths if p.steps]
    if grounded:
        prompt = llm.render_answer_prompt(question.question, _collected_triples(grounded))
        mode = ANSWER_MODE_GROUNDED
    else:
        prompt = llm.render_direct_answer_prompt(question.question)
        mode = ANSWER_MODE_PARAMETRIC
    reply = gateway.chat(prompt, "answer", ctx)
    return llm.extract_final_answer(reply, config.answer_extraction), reply, mode


def run(question, kg, pruners: PrunerPair, config: TraversalConfig, gateway) -> TraversalOutcome:
    """Full loop: initialize, expand with pruning, check sufficiency, answer."""
    ctx = llm.RunContext()
    trace = TraceRecord(question_id=question.id, question=question.question)
    started = time.monotonic()
    trace.timings["created_at"] = _dt.datetime.now(_dt.timezone.utc).isoformat()

    try:
        initial = initialize(
            question, kg, gateway, ctx, topic_extract_fallback=config.topic_extract_fallback
        )
        trace.dead_topic_entities = [p.as_dict() for p in initial if p.dead]
        beam = [p for p in initial if not p.dead]

        sufficient = False
        for depth in range(1, config.max_depth + 1):
            if not beam:
                break
            depth_start = time.monotonic()
            beam, step_traces = expand_step(beam, question, kg, pruners, config, depth, ctx)
            trace.steps.extend(step_traces)
            trace.timings.setdefault("per_depth_ms", []).append((time.monotonic() - depth_start) * 1000.0)
            if not beam:
                trace.notes.append(f"beam died at depth {depth}")
                break
            if config.sufficiency_check:
                sufficient, note = check_sufficiency(question, beam, gateway, ctx)
                if note:
                    trace.notes.append(note)
                if sufficient:
                    trace.notes.append(f"sufficient at depth {depth}")
                    break

        if config.sufficiency_check and not sufficient:
            # Without sufficient evidence the model answers from its own
            # knowledge; the trace keeps whatever the beam held for analysis.
            answer_paths: list[ReasoningPath] = []
        else:
            answer_paths = beam
        final_answer, raw, mode = answer(question, answer_paths, gateway, config, ctx)

        trace.answer = final_answer
        trace.raw_answer = raw
        trace.answer_mode = mode
        trace.paths = [p.as_dict() for p in beam]
        trace.ledger = ctx.ledger.as_dict()
        trace.cleaning = ctx.cleaning.as_dict()
        trace.timings["total_ms"] = (time.monotonic() - started) * 1000.0
        return TraversalOutcome(final_answer, raw, mode, answer_paths if mode == ANSWER_MODE_GROUNDED else [], trace)
    except KgbeamError as exc:
        trace.error = {"type": type(exc).__name__, "message": str(exc)}
        trace.answer_mode = ANSWER_MODE_ERROR
        trace.ledger = ctx.ledger.as_dict()
        trace.cleaning = ctx.cleaning.as_dict()
        trace.timings["total_ms"] = (time.monotonic() - started) * 1000.0
        return TraversalOutcome("", "", ANSWER_MODE_ERROR, [], trace)
