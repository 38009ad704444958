import json
import math
import random

import numpy as np
import pytest

from kgbeam.errors import ContractViolation, PrunerError
from kgbeam.llm import GenerationParams, RunContext, ScriptedGateway
from kgbeam.pruning import (
    BM25Pruner,
    DensePruner,
    OraclePruner,
    PruneRequest,
    PrunerConfig,
    RandomPruner,
    ScoreDistribution,
    ScoredCandidate,
    bm25_score,
    dense_score,
    lm_score,
    tokenize,
    top_k,
)


# --------------------------------------------------------------------------
# BM25: independent brute-force oracle


def bm25_oracle(query_tokens, docs, k1=1.5, b=0.75):
    token_docs = [tokenize(d) for d in docs]
    n = len(token_docs)
    avgdl = sum(len(d) for d in token_docs) / n or 1.0
    scores = []
    for d in token_docs:
        s = 0.0
        for t in query_tokens:
            f = d.count(t)
            if f == 0:
                continue
            containing = sum(1 for other in token_docs if t in other)
            idf = math.log((n - containing + 0.5) / (containing + 0.5) + 1.0)
            s += idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * len(d) / avgdl))
        scores.append(s)
    return scores


def test_tokenize_splits_dotted_relations():
    assert tokenize("language.human_language.main_country") == [
        "language", "human", "language", "main", "country",
    ]


def test_bm25_zero_overlap_scores_zero():
    dist = bm25_score(["banana"], ["country", "form of government"])
    assert dist.scores() == [0.0, 0.0]


def test_bm25_single_candidate_closed_form():
    # One doc, one matching token with f=1 and |p| = avgdl: the TF factor is
    # (k1+1)/(1+k1) = 1, so the score is the idf alone, ln((0.5/1.5) + 1).
    dist = bm25_score(["country"], ["country"])
    assert dist.scores()[0] == pytest.approx(math.log(4.0 / 3.0), abs=1e-12)


def test_bm25_three_doc_ranking():
    candidates = ["country", "form of government", "administrative parent"]
    query = tokenize("country government")
    dist = bm25_score(query, candidates)
    expected = bm25_oracle(query, candidates)
    assert dist.scores() == pytest.approx(expected, abs=1e-12)
    by_score = {c.text: c.score for c in dist.items}
    assert by_score["form of government"] > by_score["administrative parent"]
    assert by_score["country"] > by_score["administrative parent"]


def test_bm25_empty_candidates_rejected():
    with pytest.raises(ContractViolation):
        bm25_score(["x"], [])


WORDS = ["country", "government", "parent", "district", "language", "film", "river", "kiln", "truss", "gable"]


def _random_corpus(rng):
    n_docs = rng.randrange(1, 21)
    return [
        " ".join(rng.choice(WORDS) for _ in range(rng.randrange(1, 11)))
        for _ in range(n_docs)
    ]


def test_bm25_matches_oracle_on_random_corpora():
    rng = random.Random(29)
    for _ in range(100):
        docs = _random_corpus(rng)
        query = [rng.choice(WORDS) for _ in range(rng.randrange(1, 6))]
        k1 = rng.uniform(0.5, 2.5)
        b = rng.uniform(0.0, 1.0)
        got = bm25_score(query, docs, k1=k1, b=b).scores()
        want = bm25_oracle(query, docs, k1=k1, b=b)
        assert got == pytest.approx(want, abs=1e-9)


def test_bm25_candidate_permutation_permutes_scores():
    rng = random.Random(31)
    docs = _random_corpus(rng)
    query = ["country", "government"]
    base = bm25_score(query, docs).scores()
    perm = list(range(len(docs)))
    rng.shuffle(perm)
    shuffled = bm25_score(query, [docs[i] for i in perm]).scores()
    assert shuffled == pytest.approx([base[i] for i in perm], abs=1e-12)


def test_bm25_b_zero_is_length_independent():
    docs = ["country government", "district parent"]
    extended = ["country government kiln truss gable", "district parent"]
    query = ["country", "government"]
    before = bm25_score(query, docs, b=0.0).scores()[0]
    after = bm25_score(query, extended, b=0.0).scores()[0]
    assert after == pytest.approx(before, abs=1e-12)


# --------------------------------------------------------------------------
# Dense scoring


class TableEmbedder:
    def __init__(self, table, normalize=False):
        self.table = table
        self.normalize = normalize

    def embed(self, texts):
        rows = np.array([self.table[t] for t in texts], dtype=float)
        if self.normalize:
            norms = np.linalg.norm(rows, axis=1, keepdims=True)
            norms[norms == 0] = 1.0
            rows = rows / norms
        return rows


def test_dense_identical_candidate_attains_max():
    table = {
        "q": [0.6, 0.8],
        "same": [0.6, 0.8],
        "other": [1.0, 0.0],
    }
    dist = dense_score("q", ["same", "other"], TableEmbedder(table))
    scores = {c.text: c.score for c in dist.items}
    assert scores["same"] == max(scores.values())


def test_dense_one_hot_orthogonality():
    table = {
        "q": [0, 1, 0],
        "a": [1, 0, 0],
        "b": [0, 1, 0],
        "c": [0, 0, 1],
    }
    dist = dense_score("q", ["a", "b", "c"], TableEmbedder(table))
    assert dist.scores() == [0.0, 1.0, 0.0]


def test_dense_matrix_vector_hand_check():
    table = {
        "q": [1, 2, 0],
        "c1": [1, 0, 0],
        "c2": [0, 1, 0],
        "c3": [1, 1, 0],
        "c4": [0, 0, 5],
        "c5": [2, 2, 1],
    }
    dist = dense_score("q", ["c1", "c2", "c3", "c4", "c5"], TableEmbedder(table))
    assert dist.scores() == [1.0, 2.0, 3.0, 0.0, 6.0]


def test_dense_scale_invariance_under_normalizing_embedder():
    table = {"q": [3, 1], "a": [2, 2], "b": [9, 0]}
    scaled = {k: [x * 17.0 for x in v] for k, v in table.items()}
    d1 = dense_score("q", ["a", "b"], TableEmbedder(table, normalize=True))
    d2 = dense_score("q", ["a", "b"], TableEmbedder(scaled, normalize=True))
    assert np.argmax(d1.scores()) == np.argmax(d2.scores())
    assert d1.scores() == pytest.approx(d2.scores(), abs=1e-12)


def test_dense_batch_shape_violation():
    class Broken:
        def embed(self, texts):
            return np.zeros((1, 4))

    with pytest.raises(ContractViolation):
        dense_score("q", ["a", "b"], Broken())


# --------------------------------------------------------------------------
# LM scoring

TABLE5_REPLY = json.dumps(
    {
        "relations": [
            {"relation": "language.human_language.main_country", "score": 0.4, "description": "d"},
            {"relation": "language.human_language.countries_spoken_in", "score": 0.3, "description": "d"},
            {"relation": "base.rosetta.languoid.parent", "score": 0.2, "description": "d"},
        ]
    }
)

TABLE5_CANDIDATES = [
    "language.human_language.main_country",
    "language.human_language.language_family",
    "language.human_language.iso_639_3_code",
    "base.rosetta.languoid.parent",
    "language.human_language.writing_system",
    "base.rosetta.languoid.languoid_class",
    "language.human_language.countries_spoken_in",
    "kg.object_profile.prominent_type",
    "base.ontologies.ontology_instance.equivalent_instances",
    "base.rosetta.languoid.document",
    "base.rosetta.languoid.local_name",
    "language.human_language.region",
]


def _gateway(reply):
    return ScriptedGateway(lambda prompt: reply, params=GenerationParams(model="scripted"))


def test_lm_score_renormalizes_table5_scores():
    ctx = RunContext()
    dist = lm_score(
        "Name the president of the country whose main spoken language was Brahui in 1980?",
        "Brahui Language",
        TABLE5_CANDIDATES,
        "relation",
        _gateway(TABLE5_REPLY),
        ctx=ctx,
    )
    scores = {c.text: c.score for c in dist.items}
    assert scores["language.human_language.main_country"] == pytest.approx(0.4 / 0.9)
    assert scores["language.human_language.countries_spoken_in"] == pytest.approx(0.3 / 0.9)
    assert scores["base.rosetta.languoid.parent"] == pytest.approx(0.2 / 0.9)
    assert scores["language.human_language.region"] == 0.0
    assert dist.normalized and sum(dist.scores()) == pytest.approx(1.0)
    assert dist.pre_normalization_sum == pytest.approx(0.9)
    assert ctx.ledger.count("relation_prune") == 1


TABLE6_REPLY = json.dumps(
    {
        "entities": [
            {"name": "The Resident", "score": 0.0},
            {"name": "So Undercover", "score": 1.0},
            {"name": "Let Me In", "score": 0.0},
            {"name": "Begin Again", "score": 0.0},
            {"name": "The Quiet Ones", "score": 0.0},
            {"name": "A Walk Among the Tombstones", "score": 0.0},
        ]
    }
)

TABLE6_CANDIDATES = [
    "The Resident",
    "So Undercover",
    "Let Me In",
    "Begin Again",
    "The Quiet Ones",
    "A Walk Among the Tombstones",
]


def test_lm_score_one_hot_entities():
    dist = lm_score(
        "The movie featured Miley Cyrus and was produced by Tobin Armbrust?",
        "film.producer.film",
        TABLE6_CANDIDATES,
        "entity",
        _gateway(TABLE6_REPLY),
    )
    assert dist.scores() == [0.0, 1.0, 0.0, 0.0, 0.0, 0.0]


def test_lm_score_uniform_fallback_on_garbage():
    ctx = RunContext()
    dist = lm_score("q", "e", ["a", "b", "c", "d"], "relation", _gateway("I cannot answer"), ctx=ctx)
    assert dist.scores() == [0.25, 0.25, 0.25, 0.25]
    assert ctx.cleaning.unparseable == 1
    assert ctx.cleaning.categories["not_json"] == 1


def test_lm_score_error_fallback_raises_with_raw_reply():
    with pytest.raises(PrunerError) as err:
        lm_score("q", "e", ["a", "b"], "relation", _gateway("nonsense"), fallback="error")
    assert err.value.raw_reply == "nonsense"


def test_lm_score_case_insensitive_name_mapping():
    reply = json.dumps({"entities": [{"name": "so undercover", "score": 1.0}]})
    dist = lm_score("q", "rel", TABLE6_CANDIDATES, "entity", _gateway(reply))
    assert {c.text: c.score for c in dist.items}["So Undercover"] == 1.0


def test_lm_score_unmatched_names_recorded():
    ctx = RunContext()
    reply = json.dumps(
        {"entities": [{"name": "So Undercover", "score": 0.5}, {"name": "Nonexistent", "score": 0.5}]}
    )
    dist = lm_score("q", "rel", TABLE6_CANDIDATES, "entity", _gateway(reply), ctx=ctx)
    assert {c.text: c.score for c in dist.items}["So Undercover"] == 1.0
    assert ctx.cleaning.categories["name_unmatched"] == 1
    assert ctx.cleaning.unparseable == 0


def test_lm_score_positional_salvage_for_unconstrained_entities():
    dist = lm_score(
        "q", "rel", ["a", "b", "c"], "entity", _gateway("Score: 0.0, 1.0, 0.0"), constrained=False
    )
    assert dist.scores() == [0.0, 1.0, 0.0]


def test_lm_score_always_normalized_or_raises():
    for reply in (TABLE5_REPLY, TABLE6_REPLY, "garbage", json.dumps({"relations": []})):
        try:
            dist = lm_score("q", "e", ["a", "b"], "relation", _gateway(reply))
        except PrunerError:
            continue
        assert dist.normalized
        assert sum(dist.scores()) == pytest.approx(1.0, abs=1e-9)
        assert all(s >= 0 for s in dist.scores())


# --------------------------------------------------------------------------
# top_k


def topk_oracle(scores, k):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def test_top_k_all_items_when_k_large():
    dist = ScoreDistribution([ScoredCandidate("a", 0.1), ScoredCandidate("b", 0.7)])
    assert [c.text for c in top_k(dist, 10)] == ["b", "a"]


def test_top_k_table5_best():
    dist = ScoreDistribution(
        [
            ScoredCandidate("language.human_language.main_country", 0.4),
            ScoredCandidate("language.human_language.countries_spoken_in", 0.3),
            ScoredCandidate("base.rosetta.languoid.parent", 0.2),
        ]
    )
    assert [c.text for c in top_k(dist, 1)] == ["language.human_language.main_country"]


def test_top_k_matches_sort_oracle():
    rng = random.Random(37)
    for _ in range(200):
        n = rng.randrange(1, 51)
        scores = [rng.choice([0.0, 0.25, 0.5, rng.random()]) for _ in range(n)]
        dist = ScoreDistribution([ScoredCandidate(f"c{i}", s) for i, s in enumerate(scores)])
        k = rng.randrange(0, n + 2)
        got = [c.text for c in top_k(dist, k)]
        want = [f"c{i}" for i in topk_oracle(scores, k)]
        assert got == want


def test_top_k_stable_on_ties():
    dist = ScoreDistribution([ScoredCandidate("first", 0.5), ScoredCandidate("second", 0.5)])
    assert [c.text for c in top_k(dist, 1)] == ["first"]


# --------------------------------------------------------------------------
# Types and auxiliary pruners


def test_score_distribution_normalized_invariant():
    with pytest.raises(ContractViolation):
        ScoreDistribution([ScoredCandidate("a", 0.7), ScoredCandidate("b", 0.7)], normalized=True)
    with pytest.raises(ContractViolation):
        ScoredCandidate("a", float("nan"))


def test_pruner_config_invariants():
    with pytest.raises(ContractViolation):
        PrunerConfig(k=0)
    with pytest.raises(ContractViolation):
        PrunerConfig(k1=0.0)
    with pytest.raises(ContractViolation):
        PrunerConfig(b=1.5)
    assert PrunerConfig().k == 3


def _request(candidates, kind="relation"):
    return PruneRequest("q1", "what is the country of x", "X", tuple(candidates), kind)


def test_bm25_pruner_interface():
    dist = BM25Pruner().score(_request(["country", "kiln"]))
    assert dist.items[0].score > dist.items[1].score


def test_oracle_pruner_scores_gold_only():
    pruner = OraclePruner({"q1": {"relations": ["country"], "entities": ["Israel"]}})
    dist = pruner.score(_request(["country", "kiln"]))
    assert dist.scores() == [1.0, 0.0]
    dist = pruner.score(_request(["Israel", "Mars"], kind="entity"))
    assert dist.scores() == [1.0, 0.0]
    dist = pruner.score(PruneRequest("other", "q", "c", ("country",), "relation"))
    assert dist.scores() == [0.0]


def test_random_pruner_deterministic_per_seed():
    a = RandomPruner(seed=5).score(_request(["a", "b", "c"])).scores()
    b = RandomPruner(seed=5).score(_request(["a", "b", "c"])).scores()
    c = RandomPruner(seed=6).score(_request(["a", "b", "c"])).scores()
    assert a == b
    assert a != c


def test_dense_pruner_interface():
    table = {"what is the country of x": [1, 0], "country": [1, 0], "kiln": [0, 1]}
    dist = DensePruner(TableEmbedder(table)).score(_request(["country", "kiln"]))
    assert dist.scores() == [1.0, 0.0]
