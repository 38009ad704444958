"""Beam-search knowledge-graph question answering with pluggable pruners."""

from .embedding import HashingEmbedder, HttpEmbeddingClient
from .evaluation import (
    AlignmentReport,
    EvalSummary,
    QuestionRecord,
    alignment_ce,
    cleaning_error_report,
    exact_match,
    load_dataset,
    normalize_answer,
    report,
)
from .kg import Direction, EntityRef, InMemoryKG, Relation, SparqlKG, Triple
from .llm import (
    CallLedger,
    ChatExchange,
    CleaningReport,
    GenerationParams,
    OpenAIChatGateway,
    RunContext,
    ScriptedGateway,
    parse_scored_json,
    render_answer_prompt,
    render_entity_prompt,
    render_relation_prompt,
    render_sufficiency_prompt,
)
from .mockllm import HeuristicChatModel
from .pruning import (
    BM25Pruner,
    DensePruner,
    LMPruner,
    OraclePruner,
    PruneRequest,
    PrunerConfig,
    PrunerPair,
    RandomPruner,
    ScoreDistribution,
    ScoredCandidate,
    bm25_score,
    dense_score,
    lm_score,
    top_k,
)
from .traversal import (
    ReasoningPath,
    TraceRecord,
    TraversalConfig,
    TraversalOutcome,
    answer,
    check_sufficiency,
    expand_step,
    initialize,
    run,
)

__version__ = "0.1.0"
