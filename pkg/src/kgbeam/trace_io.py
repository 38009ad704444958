"""Trace persistence: one JSONL file per run, one record per question.

The first line is a run-metadata header carrying the resolved config
snapshot; question records follow, keys sorted so identical runs serialize
identically.  ``completed_ids`` supports resuming an interrupted run, and
``strip_volatile`` removes wall-clock fields so traces can be compared
byte-for-byte modulo timestamps.
"""

from __future__ import annotations

import datetime as _dt
import json
from pathlib import Path
from typing import IO

SCHEMA_VERSION = 1

VOLATILE_KEYS = frozenset({"timings", "latency_ms", "created_at", "total_ms", "per_depth_ms"})


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def write_run_header(fh: IO[str], config_snapshot: dict) -> None:
    header = {
        "record": "run_meta",
        "schema_version": SCHEMA_VERSION,
        "config": config_snapshot,
        "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    fh.write(dumps_record(header) + "\n")


def append_question_record(fh: IO[str], record: dict) -> None:
    record = dict(record)
    record.setdefault("record", "question")
    record["schema_version"] = SCHEMA_VERSION
    fh.write(dumps_record(record) + "\n")
    fh.flush()


def read_trace(path: str | Path) -> tuple[dict | None, list[dict]]:
    """Return (run header or None, question records) from a trace file."""
    meta = None
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj.get("record") == "run_meta":
                meta = obj
            else:
                records.append(obj)
    return meta, records


def completed_ids(path: str | Path) -> set[str]:
    if not Path(path).exists():
        return set()
    _, records = read_trace(path)
    return {r["question_id"] for r in records if "question_id" in r}


def strip_volatile(obj):
    """Recursively drop timing/timestamp fields for determinism comparisons."""
    if isinstance(obj, dict):
        return {k: strip_volatile(v) for k, v in obj.items() if k not in VOLATILE_KEYS}
    if isinstance(obj, list):
        return [strip_volatile(v) for v in obj]
    return obj
