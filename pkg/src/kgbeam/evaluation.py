"""Dataset loading, exact-match scoring, alignment cross-entropy, and reports.

Exact match follows the usual QA normalization (lowercase, strip punctuation,
collapse whitespace, drop leading articles) and can be relaxed down to raw
string equality.  The alignment metric compares two runs' exploration
decisions: matched steps are restricted to their shared candidates, both
score sets renormalized, the candidate side smoothed, and the cross-entropy
averaged per question and overall.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DatasetError, EvaluationError
from .kg import EntityRef
from .llm import CleaningReport

ARTICLES = ("a", "an", "the")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass(frozen=True)
class QuestionRecord:
    id: str
    question: str
    topic_entities: tuple[EntityRef, ...]
    answers: tuple[str, ...]

    def __post_init__(self):
        if not self.id:
            raise ValueError("question id must be non-empty")
        if not self.answers:
            raise ValueError(f"question {self.id!r} has no gold answers")


# --------------------------------------------------------------------------
# Dataset loaders


def _cwq_record(item: dict, index: int, path: str) -> QuestionRecord:
    try:
        qid = str(item["ID"])
        question = item["question"]
        topic = tuple(EntityRef(mid, label) for mid, label in item.get("topic_entity", {}).items())
        raw_answers = item.get("answers", item.get("answer"))
        answers: list[str] = []
        if isinstance(raw_answers, str):
            answers = [raw_answers]
        elif isinstance(raw_answers, list):
            for a in raw_answers:
                if isinstance(a, str):
                    answers.append(a)
                elif isinstance(a, dict):
                    if a.get("answer"):
                        answers.append(a["answer"])
                    answers.extend(a.get("aliases", ()))
        return QuestionRecord(qid, question, topic, tuple(answers))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed CWQ record: {exc}", path=path, record_index=index) from exc


def _webqsp_record(item: dict, index: int, path: str) -> QuestionRecord:
    try:
        qid = str(item["QuestionId"])
        question = item.get("ProcessedQuestion") or item["RawQuestion"]
        topics: list[EntityRef] = []
        answers: list[str] = []
        for parse in item.get("Parses", ()):
            mid = parse.get("TopicEntityMid")
            if mid and all(t.id != mid for t in topics):
                topics.append(EntityRef(mid, parse.get("TopicEntityName")))
            for ans in parse.get("Answers", ()):
                for key in ("EntityName", "AnswerArgument"):
                    value = ans.get(key)
                    if value and value not in answers:
                        answers.append(value)
        return QuestionRecord(qid, question, tuple(topics), tuple(answers))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed WebQSP record: {exc}", path=path, record_index=index) from exc


def load_dataset(path: str | Path, kind: str) -> list[QuestionRecord]:
    """Load the public JSON distribution of CWQ or WebQSP, keeping file order."""
    if kind not in ("cwq", "webqsp"):
        raise ValueError(f"kind must be 'cwq' or 'webqsp', got {kind!r}")
    path = str(path)
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"not valid JSON: {exc}", path=path) from exc
    if kind == "webqsp" and isinstance(data, dict):
        data = data.get("Questions", data)
    if not isinstance(data, list):
        raise DatasetError("top-level JSON value is not a record list", path=path)
    maker = _cwq_record if kind == "cwq" else _webqsp_record
    records = [maker(item, i, path) for i, item in enumerate(data)]
    seen: set[str] = set()
    for i, rec in enumerate(records):
        if rec.id in seen:
            raise DatasetError(f"duplicate question id {rec.id!r}", path=path, record_index=i)
        seen.add(rec.id)
    return records


# --------------------------------------------------------------------------
# Exact match


def normalize_answer(text: str, level: str = "full") -> str:
    """Normalization levels: full (lowercase, strip punctuation, collapse
    whitespace, drop leading articles), lower (lowercase + whitespace), raw."""
    if level == "raw":
        return text
    lowered = " ".join(text.lower().split())
    if level == "lower":
        return lowered
    if level != "full":
        raise ValueError(f"unknown normalization level: {level!r}")
    stripped = lowered.translate(_PUNCT_TABLE)
    tokens = stripped.split()
    while tokens and tokens[0] in ARTICLES:
        tokens.pop(0)
    return " ".join(tokens)


def exact_match(predicted: str, gold_answers, level: str = "full") -> int:
    """1 iff the normalized prediction equals any normalized gold alias."""
    pred = normalize_answer(predicted, level)
    return int(any(pred == normalize_answer(g, level) for g in gold_answers))


@dataclass
class EvalSummary:
    dataset: str
    bits: dict[str, int]
    mode_breakdown: dict[str, int]
    metadata: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> float:
        return sum(self.bits.values()) / len(self.bits) if self.bits else 0.0

    def as_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "aggregate_em": self.aggregate,
            "n": len(self.bits),
            "bits": dict(self.bits),
            "mode_breakdown": dict(self.mode_breakdown),
            "metadata": dict(self.metadata),
        }


def evaluate_traces(
    records: list[dict],
    questions: list[QuestionRecord],
    dataset_name: str,
    level: str = "full",
    metadata: dict | None = None,
) -> EvalSummary:
    """Score every trace record that has a matching dataset question."""
    by_id = {q.id: q for q in questions}
    bits: dict[str, int] = {}
    modes: dict[str, int] = {}
    matched = False
    for rec in records:
        qid = rec.get("question_id")
        question = by_id.get(qid)
        if question is None:
            continue
        matched = True
        bits[qid] = exact_match(rec.get("answer", ""), question.answers, level)
        mode = rec.get("answer_mode", "unknown")
        modes[mode] = modes.get(mode, 0) + 1
    if not matched:
        raise EvaluationError("no trace record matches any dataset question id")
    return EvalSummary(dataset_name, bits, modes, metadata or {})


# --------------------------------------------------------------------------
# Exploration alignment


@dataclass
class AlignmentReport:
    per_step: list[dict]
    per_question: dict[str, float]
    mean_ce: float
    epsilon: float
    coverage: int
    skipped_empty_intersection: int
    skipped_unmatched: int

    def as_dict(self) -> dict:
        return {
            "mean_ce": self.mean_ce,
            "epsilon": self.epsilon,
            "coverage": self.coverage,
            "skipped_empty_intersection": self.skipped_empty_intersection,
            "skipped_unmatched": self.skipped_unmatched,
            "per_question": dict(self.per_question),
            "per_step": list(self.per_step),
        }


def _step_index(records: list[dict], stages: tuple[str, ...]) -> dict[tuple, list[dict]]:
    index: dict[tuple, list[dict]] = {}
    for rec in records:
        qid = rec.get("question_id")
        for step in rec.get("steps", ()):
            if step.get("stage") not in stages:
                continue
            if not step.get("candidates"):
                continue
            key = (qid, step["depth"], step["stage"])
            index.setdefault(key, []).append(step)
    return index


def _restricted_distribution(step: dict, support: list[str]) -> list[float]:
    scores = {c["text"]: max(float(c["score"]), 0.0) for c in step["candidates"]}
    raw = [scores.get(text, 0.0) for text in support]
    total = sum(raw)
    if total <= 0:
        return [1.0 / len(support)] * len(support)
    return [v / total for v in raw]


def step_cross_entropy(p: list[float], q: list[float], epsilon: float) -> float:
    """CE of the smoothed candidate distribution against the reference."""
    size = len(q)
    denom = 1.0 + epsilon * size
    return -sum(pi * math.log((qi + epsilon) / denom) for pi, qi in zip(p, q) if pi > 0.0)


def alignment_ce(
    reference_records: list[dict],
    candidate_records: list[dict],
    epsilon: float = 1e-9,
    stages: tuple[str, ...] = ("relation", "entity"),
) -> AlignmentReport:
    """Cross-entropy alignment of candidate-run pruning against a reference run.

    Steps match on (question, depth, stage) in record order; each matched pair
    is restricted to the intersection of its candidate sets, both sides
    renormalized, the candidate side smoothed by epsilon.
    """
    if epsilon <= 0:
        raise EvaluationError("epsilon must be > 0")
    ref_index = _step_index(reference_records, stages)
    cand_index = _step_index(candidate_records, stages)
    ref_qids = {r.get("question_id") for r in reference_records}
    cand_qids = {r.get("question_id") for r in candidate_records}
    if not (ref_qids & cand_qids):
        raise EvaluationError("reference and candidate traces share no question ids")

    per_step: list[dict] = []
    per_question_acc: dict[str, list[float]] = {}
    skipped_empty = 0
    skipped_unmatched = 0
    for key, ref_steps in sorted(ref_index.items(), key=lambda kv: (str(kv[0][0]), kv[0][1], kv[0][2])):
        cand_steps = cand_index.get(key, [])
        skipped_unmatched += abs(len(ref_steps) - len(cand_steps))
        for ref_step, cand_step in zip(ref_steps, cand_steps):
            ref_texts = [c["text"] for c in ref_step["candidates"]]
            cand_texts = {c["text"] for c in cand_step["candidates"]}
            support = [t for t in ref_texts if t in cand_texts]
            if not support:
                skipped_empty += 1
                continue
            p = _restricted_distribution(ref_step, support)
            q = _restricted_distribution(cand_step, support)
            ce = step_cross_entropy(p, q, epsilon)
            qid, depth, stage = key
            per_step.append({"question_id": qid, "depth": depth, "stage": stage, "ce": ce})
            per_question_acc.setdefault(qid, []).append(ce)
    skipped_unmatched += sum(
        len(steps) for key, steps in cand_index.items() if key not in ref_index
    )

    per_question = {qid: sum(vals) / len(vals) for qid, vals in per_question_acc.items()}
    mean_ce = (
        sum(s["ce"] for s in per_step) / len(per_step) if per_step else 0.0
    )
    return AlignmentReport(
        per_step=per_step,
        per_question=per_question,
        mean_ce=mean_ce,
        epsilon=epsilon,
        coverage=len(per_step),
        skipped_empty_intersection=skipped_empty,
        skipped_unmatched=skipped_unmatched,
    )


# --------------------------------------------------------------------------
# Cleaning-error aggregation


def cleaning_error_report(trace_sets: list[tuple[dict, list[dict]]]) -> dict:
    """Aggregate cleaning counts per run, grouped by (model, prompt_mode).

    ``trace_sets`` pairs each run's metadata dict with its question records.
    """
    groups: dict[tuple[str, str], CleaningReport] = {}
    for metadata, records in trace_sets:
        key = (str(metadata.get("model", "unknown")), str(metadata.get("prompt_mode", "unknown")))
        agg = groups.setdefault(key, CleaningReport())
        for rec in records:
            cleaning = rec.get("cleaning")
            if cleaning:
                agg.merge(CleaningReport.from_dict(cleaning))
    rows = [
        {"model": model, "prompt_mode": mode, **report.as_dict()}
        for (model, mode), report in sorted(groups.items())
    ]
    return {"rows": rows}


def render_cleaning_table(report: dict) -> str:
    lines = [f"{'model':<24} {'prompt_mode':<14} {'outputs':>8} {'unparseable':>12}"]
    for row in report["rows"]:
        lines.append(
            f"{row['model']:<24} {row['prompt_mode']:<14} {row['total_outputs']:>8} {row['unparseable']:>12}"
        )
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Comparison reports


def report(summaries: list[EvalSummary], layout: str = "cot_vs_tog") -> tuple[str, dict]:
    """Render per-method rows with per-dataset EM columns plus mean rows.

    Rows sharing a ``group`` (typically the model) compete for the bold
    per-dataset maximum.  Returns the plain-text table and a machine-readable
    dict.
    """
    if layout not in ("cot_vs_tog", "pruner_matrix"):
        raise ValueError(f"unknown layout: {layout!r}")
    if not summaries:
        raise EvaluationError("no summaries to report")

    datasets = sorted({s.dataset for s in summaries})
    cells: dict[tuple[str, str], dict[str, float]] = {}
    order: list[tuple[str, str]] = []
    for s in summaries:
        group = str(s.metadata.get("group", s.metadata.get("model", "model")))
        method = str(s.metadata.get("method", s.metadata.get("pruner", "run")))
        key = (group, method)
        if key not in cells:
            cells[key] = {}
            order.append(key)
        if s.dataset in cells[key]:
            raise EvaluationError(f"duplicate summary for {key} on {s.dataset}")
        cells[key][s.dataset] = s.aggregate
    covered = {ds for row in cells.values() for ds in row}
    for key, row in cells.items():
        if set(row) != covered:
            raise EvaluationError(f"summaries for {key} do not cover every dataset in the report")

    bold: dict[tuple[str, str, str], bool] = {}
    for group in {g for g, _ in order}:
        group_keys = [k for k in order if k[0] == group]
        for ds in datasets:
            best = max(cells[k][ds] for k in group_keys)
            for k in group_keys:
                bold[(k[0], k[1], ds)] = cells[k][ds] == best

    methods = list(dict.fromkeys(m for _, m in order))
    mean_rows = {
        m: {
            ds: sum(cells[k][ds] for k in order if k[1] == m) / sum(1 for k in order if k[1] == m)
            for ds in datasets
        }
        for m in methods
    }

    width = max([len(f"{g} {m}") for g, m in order] + [len(f"Mean {m}") for m in methods]) + 2
    header = f"{'Models':<{width}}" + "".join(f"{ds:>12}" for ds in datasets)
    lines = [header, "-" * len(header)]
    for group, method in order:
        label = f"{group} {method}"
        row = f"{label:<{width}}"
        for ds in datasets:
            value = f"{cells[(group, method)][ds]:.3f}"
            if bold[(group, method, ds)]:
                value = f"**{value}**"
            row += f"{value:>12}"
        lines.append(row)
    for m in methods:
        row = f"{'Mean ' + m:<{width}}"
        for ds in datasets:
            row += f"{mean_rows[m][ds]:.3f}".rjust(12)
        lines.append(row)
    text = "\n".join(lines)

    machine = {
        "layout": layout,
        "datasets": datasets,
        "rows": [
            {
                "group": g,
                "method": m,
                "em": {ds: cells[(g, m)][ds] for ds in datasets},
                "bold": {ds: bold[(g, m, ds)] for ds in datasets},
            }
            for g, m in order
        ],
        "mean": [{"method": m, "em": mean_rows[m]} for m in methods],
    }
    return text, machine
