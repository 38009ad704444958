"""Command-line entry point.

Subcommands: ``traverse`` (one question, for debugging), ``run`` (batch over
a dataset, resumable), ``eval`` (exact match against gold answers), ``align``
(cross-entropy between two runs' exploration), and ``errors`` (cleaning-error
aggregation).  Progress goes to stderr; stdout carries machine-consumable
output only.  Exit codes: 0 success, 2 configuration, 3 transport, 4
evaluation, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from threading import Lock

from . import evaluation, trace_io, traversal
from .config import RunConfig
from .errors import (
    ApiError,
    ConfigError,
    DatasetError,
    EvaluationError,
    KgbeamError,
    TransportError,
)

EXIT_CONFIG = 2
EXIT_TRANSPORT = 3
EXIT_EVALUATION = 4


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config, overrides=args.set or [])


def _run_metadata(config: RunConfig) -> dict:
    return {
        "model": config["chat"]["model"],
        "pruner": config["pruner"]["strategy"],
        "prompt_mode": config["chat"]["prompt_mode"],
        "config_hash": config.config_hash(),
    }


def _write_config_snapshot(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"config": config.snapshot(), "metadata": _run_metadata(config)}
    (out_dir / "resolved_config.json").write_text(
        json.dumps(snapshot, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def _traverse_one(question, config: RunConfig, kg, pruners, gateway):
    trav_cfg = config.build_traversal_config()
    if config["cot_mode"]:
        trav_cfg.max_depth = 1
        trav_cfg.sufficiency_check = False
        outcome = _cot_answer(question, gateway, trav_cfg)
    else:
        outcome = traversal.run(question, kg, pruners, trav_cfg, gateway)
    return outcome


def _cot_answer(question, gateway, trav_cfg):
    """Direct one-call baseline: no KG access, purpose `answer` only."""
    from . import llm

    ctx = llm.RunContext()
    trace = traversal.TraceRecord(question_id=question.id, question=question.question)
    prompt = llm.render_direct_answer_prompt(question.question)
    reply = gateway.chat(prompt, "answer", ctx)
    answer = llm.extract_final_answer(reply, trav_cfg.answer_extraction)
    trace.answer = answer
    trace.raw_answer = reply
    trace.answer_mode = traversal.ANSWER_MODE_PARAMETRIC
    trace.ledger = ctx.ledger.as_dict()
    trace.cleaning = ctx.cleaning.as_dict()
    return traversal.TraversalOutcome(answer, reply, traversal.ANSWER_MODE_PARAMETRIC, [], trace)


def cmd_traverse(args) -> int:
    config = _load_config(args)
    dataset_cfg = config["dataset"]
    question = None
    if dataset_cfg.get("path") and not args.text:
        records = evaluation.load_dataset(dataset_cfg["path"], dataset_cfg["kind"])
        by_id = {q.id: q for q in records}
        question = by_id.get(args.question)
        if question is None:
            _log(f"error: question id not found: {args.question}")
            return EXIT_CONFIG
    if question is None:
        # Ad-hoc text has no gold answers and usually needs the
        # topic-extraction fallback enabled to find its root entities.
        question = evaluation.QuestionRecord(
            id="adhoc-0", question=args.question, topic_entities=(), answers=("",)
        )
    kg = config.build_kg()
    gateway = config.build_gateway()
    pruners = config.build_pruners(gateway)
    outcome = _traverse_one(question, config, kg, pruners, gateway)

    out_dir = Path(config["output_dir"])
    _write_config_snapshot(config, out_dir)
    trace_path = out_dir / "traverse.jsonl"
    with open(trace_path, "w", encoding="utf-8") as fh:
        trace_io.write_run_header(fh, {"config": config.snapshot(), "metadata": _run_metadata(config)})
        trace_io.append_question_record(fh, outcome.trace.as_dict())

    _log(f"question: {question.question}")
    for path in outcome.paths:
        _log("path: " + " ; ".join(f"('{h}', '{r}', '{t}')" for h, r, t in path.triples()))
    _log("ledger: " + json.dumps(outcome.trace.ledger, sort_keys=True))
    print(
        json.dumps(
            {"answer": outcome.answer, "mode": outcome.mode, "trace": str(trace_path)},
            sort_keys=True,
            ensure_ascii=False,
        )
    )
    return 0 if outcome.mode != traversal.ANSWER_MODE_ERROR else 1


def cmd_run(args) -> int:
    config = _load_config(args)
    dataset_cfg = config["dataset"]
    if not dataset_cfg.get("path"):
        raise ConfigError("dataset.path is required for run")
    questions = evaluation.load_dataset(dataset_cfg["path"], dataset_cfg["kind"])
    out_dir = Path(config["output_dir"])
    _write_config_snapshot(config, out_dir)
    trace_path = out_dir / "trace.jsonl"

    done = trace_io.completed_ids(trace_path)
    pending = [q for q in questions if q.id not in done]
    _log(f"{len(questions)} questions, {len(done)} already done, {len(pending)} to run")

    kg = config.build_kg()
    gateway = config.build_gateway()
    pruners = config.build_pruners(gateway)

    new_file = not trace_path.exists()
    write_lock = Lock()
    with open(trace_path, "a", encoding="utf-8") as fh:
        if new_file:
            trace_io.write_run_header(fh, {"config": config.snapshot(), "metadata": _run_metadata(config)})

        def one(question):
            outcome = _traverse_one(question, config, kg, pruners, gateway)
            with write_lock:
                trace_io.append_question_record(fh, outcome.trace.as_dict())
            return outcome

        jobs = max(1, int(config["jobs"]))
        if jobs == 1:
            for i, question in enumerate(pending, start=1):
                outcome = one(question)
                _log(f"[{i}/{len(pending)}] {question.id} mode={outcome.mode}")
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                for i, outcome in enumerate(pool.map(one, pending), start=1):
                    _log(f"[{i}/{len(pending)}] mode={outcome.mode}")
    print(json.dumps({"trace": str(trace_path), "ran": len(pending), "skipped": len(done)}))
    return 0


def cmd_eval(args) -> int:
    meta, records = trace_io.read_trace(args.trace)
    questions = evaluation.load_dataset(args.dataset, args.kind)
    metadata = (meta or {}).get("config", {}).get("metadata", {})
    summary = evaluation.evaluate_traces(
        records, questions, dataset_name=args.dataset_name or args.kind, level=args.normalization, metadata=metadata
    )
    out = Path(args.out) if args.out else Path(args.trace).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_summary.json").write_text(
        json.dumps(summary.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    lines = [f"{qid}\t{bit}" for qid, bit in sorted(summary.bits.items())]
    (out / "eval_summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"em {summary.aggregate:.6f} n {len(summary.bits)}")
    return 0


def cmd_align(args) -> int:
    _, ref_records = trace_io.read_trace(args.reference)
    _, cand_records = trace_io.read_trace(args.candidate)
    stages = tuple(args.stages.split(",")) if args.stages else ("relation", "entity")
    report = evaluation.alignment_ce(ref_records, cand_records, epsilon=args.epsilon, stages=stages)
    out = Path(args.out) if args.out else Path(args.candidate).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "alignment.json").write_text(
        json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"mean_ce {report.mean_ce:.6f} steps {report.coverage} "
        f"skipped {report.skipped_empty_intersection + report.skipped_unmatched}"
    )
    return 0


def cmd_errors(args) -> int:
    trace_sets = []
    for path in args.traces:
        meta, records = trace_io.read_trace(path)
        metadata = (meta or {}).get("config", {}).get("metadata", {})
        trace_sets.append((metadata, records))
    report = evaluation.cleaning_error_report(trace_sets)
    out = Path(args.out) if args.out else Path(args.traces[0]).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "cleaning_errors.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(evaluation.render_cleaning_table(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgbeam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")

    p = sub.add_parser("traverse", help="run one question and print the answer")
    add_config_args(p)
    p.add_argument("question", help="question id from the configured dataset, or literal text with --text")
    p.add_argument("--text", action="store_true", help="treat the argument as literal question text")
    p.set_defaults(fn=cmd_traverse)

    p = sub.add_parser("run", help="traverse every dataset question, resumably")
    add_config_args(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="exact-match a trace against a dataset")
    p.add_argument("trace")
    p.add_argument("dataset")
    p.add_argument("--kind", choices=("cwq", "webqsp"), default="cwq")
    p.add_argument("--dataset-name", default=None)
    p.add_argument("--normalization", choices=("full", "lower", "raw"), default="full")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("align", help="cross-entropy between two runs' exploration")
    p.add_argument("reference")
    p.add_argument("candidate")
    p.add_argument("--epsilon", type=float, default=1e-9)
    p.add_argument("--stages", default=None, help="comma-separated subset of relation,entity")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_align)

    p = sub.add_parser("errors", help="aggregate cleaning errors across traces")
    p.add_argument("traces", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_errors)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (TransportError, ApiError) as exc:
        _log(f"transport error: {exc}")
        return EXIT_TRANSPORT
    except (EvaluationError, DatasetError) as exc:
        _log(f"evaluation error: {exc}")
        return EXIT_EVALUATION
    except OSError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except KgbeamError as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
