import json
import math
import random

import pytest

from kgbeam.errors import DatasetError, EvaluationError
from kgbeam.evaluation import (
    EvalSummary,
    QuestionRecord,
    alignment_ce,
    cleaning_error_report,
    evaluate_traces,
    exact_match,
    load_dataset,
    normalize_answer,
    render_cleaning_table,
    report,
)

# --------------------------------------------------------------------------
# Dataset loading

CWQ_FIXTURE = [
    {
        "ID": "cwq-0",
        "question": "What type of government is used in the country with Northern District?",
        "topic_entity": {"m.nd": "Northern District"},
        "answer": "Parliamentary system",
    },
    {
        "ID": "cwq-1",
        "question": "Who wrote the anthem?",
        "topic_entity": {"m.an": "Anthem"},
        "answers": [{"answer": "Jane Doe", "aliases": ["J. Doe"]}],
    },
    {
        "ID": "cwq-2",
        "question": "Where is the river?",
        "topic_entity": {"m.rv": "River"},
        "answer": "Delta",
    },
]

WEBQSP_FIXTURE = {
    "Questions": [
        {
            "QuestionId": "WebQTest-0",
            "RawQuestion": "what language do jamaican people speak?",
            "Parses": [
                {
                    "TopicEntityMid": "m.03_r3",
                    "TopicEntityName": "Jamaica",
                    "Answers": [
                        {"AnswerType": "Entity", "AnswerArgument": "m.01428y", "EntityName": "Jamaican English"},
                        {"AnswerType": "Entity", "AnswerArgument": "m.04ygk0", "EntityName": "Jamaican Creole"},
                    ],
                }
            ],
        }
    ]
}


def test_load_cwq_fixture(tmp_path):
    path = tmp_path / "cwq.json"
    path.write_text(json.dumps(CWQ_FIXTURE), encoding="utf-8")
    records = load_dataset(path, "cwq")
    assert [r.id for r in records] == ["cwq-0", "cwq-1", "cwq-2"]
    assert records[0].topic_entities[0].label == "Northern District"
    assert records[1].answers == ("Jane Doe", "J. Doe")


def test_load_webqsp_fixture(tmp_path):
    path = tmp_path / "webqsp.json"
    path.write_text(json.dumps(WEBQSP_FIXTURE), encoding="utf-8")
    records = load_dataset(path, "webqsp")
    assert records[0].id == "WebQTest-0"
    assert records[0].topic_entities[0].id == "m.03_r3"
    assert set(records[0].answers) == {"Jamaican English", "m.01428y", "Jamaican Creole", "m.04ygk0"}


def test_load_malformed_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("[{]", encoding="utf-8")
    with pytest.raises(DatasetError):
        load_dataset(path, "cwq")


def test_load_reports_offending_record(tmp_path):
    path = tmp_path / "cwq.json"
    path.write_text(json.dumps([CWQ_FIXTURE[0], {"ID": "bad"}]), encoding="utf-8")
    with pytest.raises(DatasetError) as err:
        load_dataset(path, "cwq")
    assert err.value.record_index == 1


def test_load_rejects_duplicate_ids(tmp_path):
    path = tmp_path / "cwq.json"
    path.write_text(json.dumps([CWQ_FIXTURE[0], CWQ_FIXTURE[0]]), encoding="utf-8")
    with pytest.raises(DatasetError):
        load_dataset(path, "cwq")


# --------------------------------------------------------------------------
# Exact match


def test_exact_match_examples():
    assert exact_match("Parliamentary system", ["Parliamentary system"]) == 1
    assert exact_match("the parliamentary system", ["Parliamentary system"]) == 1
    assert exact_match("Israel", ["Parliamentary system"]) == 0


def test_normalization_pipeline():
    assert normalize_answer("  The  U.S.  Dollar! ") == "us dollar"
    assert normalize_answer("An Apple") == "apple"
    assert normalize_answer("Raw, Text", level="raw") == "Raw, Text"
    assert normalize_answer("Mixed Case", level="lower") == "mixed case"


def test_exact_match_symmetry():
    rng = random.Random(41)
    words = ["the", "Parliament", "system.", "A", "river!", "Delta"]
    for _ in range(100):
        a = " ".join(rng.choice(words) for _ in range(rng.randrange(1, 4)))
        b = " ".join(rng.choice(words) for _ in range(rng.randrange(1, 4)))
        assert exact_match(a, [b]) == exact_match(b, [a])


def test_evaluate_traces_aggregate_is_mean_of_bits():
    questions = [
        QuestionRecord(f"q{i}", "q", (), (f"ans{i}",)) for i in range(10)
    ]
    rng = random.Random(43)
    records = []
    for i, q in enumerate(questions):
        right = rng.random() < 0.5
        records.append(
            {
                "question_id": q.id,
                "answer": f"ans{i}" if right else "wrong",
                "answer_mode": "kg_grounded" if right else "fallback_parametric",
            }
        )
    summary = evaluate_traces(records, questions, "toy")
    assert summary.aggregate == pytest.approx(
        sum(summary.bits.values()) / len(summary.bits), abs=1e-12
    )
    assert sum(summary.mode_breakdown.values()) == 10


def test_evaluate_traces_requires_overlap():
    questions = [QuestionRecord("q1", "q", (), ("a",))]
    with pytest.raises(EvaluationError):
        evaluate_traces([{"question_id": "other", "answer": "a"}], questions, "toy")


# --------------------------------------------------------------------------
# Alignment cross-entropy


def _step(depth, stage, scores, texts=None):
    texts = texts or [f"c{i}" for i in range(len(scores))]
    return {
        "depth": depth,
        "stage": stage,
        "path_index": 0,
        "candidates": [{"text": t, "score": s} for t, s in zip(texts, scores)],
        "kept": [],
    }


def _record(qid, steps):
    return {"question_id": qid, "steps": steps}


def _entropy(p):
    return -sum(x * math.log(x) for x in p if x > 0)


def test_self_alignment_equals_entropy():
    steps = [
        _step(1, "relation", [0.5, 0.3, 0.2]),
        _step(1, "entity", [1.0, 0.0]),
        _step(2, "relation", [0.25, 0.25, 0.25, 0.25]),
    ]
    trace = [_record("q1", steps)]
    out = alignment_ce(trace, trace, epsilon=1e-9)
    assert out.coverage == 3
    expected = {
        (1, "relation"): _entropy([0.5, 0.3, 0.2]),
        (1, "entity"): _entropy([1.0, 0.0]),
        (2, "relation"): _entropy([0.25] * 4),
    }
    got = {(s["depth"], s["stage"]): s["ce"] for s in out.per_step}
    for key, value in expected.items():
        assert got[key] == pytest.approx(value, abs=1e-9)


def test_one_hot_match_ce_near_zero():
    ref = [_record("q1", [_step(1, "relation", [1.0, 0.0, 0.0])])]
    cand = [_record("q1", [_step(1, "relation", [1.0, 0.0, 0.0])])]
    out = alignment_ce(ref, cand, epsilon=1e-9)
    assert out.per_step[0]["ce"] < 1e-6


def test_table5_scores_vs_uniform_hand_arithmetic():
    eps = 1e-9
    p = [0.4, 0.3, 0.2, 0.1]
    ref = [_record("q1", [_step(1, "relation", p)])]
    cand = [_record("q1", [_step(1, "relation", [1.0, 1.0, 1.0, 1.0])])]
    out = alignment_ce(ref, cand, epsilon=eps)
    smoothed = (0.25 + eps) / (1 + 4 * eps)
    expected = -sum(pi * math.log(smoothed) for pi in p)
    assert out.per_step[0]["ce"] == pytest.approx(expected, abs=1e-12)


def test_alignment_permutation_invariance():
    rng = random.Random(47)
    for _ in range(100):
        n = rng.randrange(2, 7)
        texts = [f"c{i}" for i in range(n)]
        ref_scores = [rng.random() for _ in range(n)]
        cand_scores = [rng.random() for _ in range(n)]
        ref = [_record("q1", [_step(1, "relation", ref_scores, texts)])]
        base = alignment_ce(ref, [_record("q1", [_step(1, "relation", cand_scores, texts)])]).mean_ce
        perm = list(range(n))
        rng.shuffle(perm)
        shuffled = [_record("q1", [_step(1, "relation", [cand_scores[i] for i in perm], [texts[i] for i in perm])])]
        assert alignment_ce(ref, shuffled).mean_ce == pytest.approx(base, abs=1e-9)
        ref_perm = [_record("q1", [_step(1, "relation", [ref_scores[i] for i in perm], [texts[i] for i in perm])])]
        assert alignment_ce(ref_perm, [_record("q1", [_step(1, "relation", cand_scores, texts)])]).mean_ce == pytest.approx(base, abs=1e-9)


def test_alignment_disjoint_ids_error():
    ref = [_record("q1", [_step(1, "relation", [1.0])])]
    cand = [_record("q2", [_step(1, "relation", [1.0])])]
    with pytest.raises(EvaluationError):
        alignment_ce(ref, cand)


def test_alignment_skips_empty_intersection():
    ref = [_record("q1", [_step(1, "relation", [0.6, 0.4], ["a", "b"])])]
    cand = [_record("q1", [_step(1, "relation", [0.6, 0.4], ["x", "y"])])]
    out = alignment_ce(ref, cand)
    assert out.coverage == 0
    assert out.skipped_empty_intersection == 1
    assert out.mean_ce == 0.0


def test_alignment_ce_nonnegative_and_finite():
    rng = random.Random(53)
    for _ in range(50):
        n = rng.randrange(1, 6)
        ref = [_record("q1", [_step(1, "entity", [rng.random() for _ in range(n)])])]
        cand = [_record("q1", [_step(1, "entity", [rng.random() for _ in range(n)])])]
        ce = alignment_ce(ref, cand).mean_ce
        assert math.isfinite(ce) and ce >= 0


# --------------------------------------------------------------------------
# Cleaning errors


def _cleaned_record(qid, unparseable, total):
    return {
        "question_id": qid,
        "cleaning": {
            "total_outputs": total,
            "unparseable": unparseable,
            "categories": {"not_json": unparseable},
        },
    }


def test_cleaning_error_additivity():
    meta = {"model": "m1", "prompt_mode": "constrained"}
    out = cleaning_error_report(
        [(meta, [_cleaned_record("a", 3, 10)]), (meta, [_cleaned_record("b", 5, 10)])]
    )
    assert out["rows"] == [
        {
            "model": "m1",
            "prompt_mode": "constrained",
            "total_outputs": 20,
            "unparseable": 8,
            "categories": {"not_json": 8, "schema_mismatch": 0, "score_not_numeric": 0, "name_unmatched": 0},
        }
    ]


def test_cleaning_error_two_mode_comparison():
    rows = cleaning_error_report(
        [
            ({"model": "m1", "prompt_mode": "constrained"}, [_cleaned_record("a", 1, 10)]),
            ({"model": "m1", "prompt_mode": "unconstrained"}, [_cleaned_record("a", 6, 10)]),
        ]
    )["rows"]
    assert len(rows) == 2
    assert {r["prompt_mode"] for r in rows} == {"constrained", "unconstrained"}
    table = render_cleaning_table({"rows": rows})
    assert "constrained" in table and "unconstrained" in table


def test_cleaning_error_empty():
    assert cleaning_error_report([])["rows"] == []


# --------------------------------------------------------------------------
# Reports


def _summary(dataset, group, method, fraction, n=1000):
    k = round(fraction * n)
    bits = {f"q{i}": 1 if i < k else 0 for i in range(n)}
    return EvalSummary(dataset, bits, {}, {"group": group, "method": method})


def test_report_cot_vs_tog_bolding():
    cot = _summary("CWQ", "model-a", "CoT", 0.129)
    tog = _summary("CWQ", "model-a", "ToG", 0.081)
    text, machine = report([cot, tog], layout="cot_vs_tog")
    rows = {r["method"]: r for r in machine["rows"]}
    assert rows["CoT"]["bold"]["CWQ"] is True
    assert rows["ToG"]["bold"]["CWQ"] is False
    assert "**0.129**" in text


def test_report_single_summary_trivially_bold():
    text, machine = report([_summary("CWQ", "m", "ToG", 0.5)])
    assert machine["rows"][0]["bold"]["CWQ"] is True


def test_report_pruner_matrix_block():
    summaries = [
        _summary("CWQ", "model-a", "ToG", 0.081),
        _summary("CWQ", "model-a", "BM25", 0.106),
        _summary("CWQ", "model-a", "SentenceBERT", 0.061),
        _summary("CWQ", "model-a", "GTR", 0.123),
    ]
    text, machine = report(summaries, layout="pruner_matrix")
    assert len(machine["rows"]) == 4
    best = {r["method"]: r["bold"]["CWQ"] for r in machine["rows"]}
    assert best == {"ToG": False, "BM25": False, "SentenceBERT": False, "GTR": True}
    assert len(machine["mean"]) == 4


def test_report_mean_row_matches_recomputation():
    summaries = [
        _summary("CWQ", "model-a", "CoT", 0.2),
        _summary("CWQ", "model-b", "CoT", 0.4),
    ]
    _, machine = report(summaries)
    assert machine["mean"][0]["em"]["CWQ"] == pytest.approx(0.3)


def test_report_mixed_dataset_coverage_errors():
    with pytest.raises(EvaluationError):
        report([_summary("CWQ", "a", "CoT", 0.1), _summary("WebQSP", "b", "ToG", 0.2)])
