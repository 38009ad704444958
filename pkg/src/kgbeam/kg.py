"""Knowledge-graph access layer.

Two backends behind one query surface: an in-memory triple store loaded from
flat files (TSV or an N-Triples subset) and a client for a SPARQL 1.1 HTTP
endpoint with Freebase-style predicates.  Both expose relation and entity
neighborhood queries with deterministic ordering, and treat unknown entities
as dead ends (empty results) rather than errors so that beam search can keep
going.
"""

from __future__ import annotations

import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Protocol

import requests

from .errors import ApiError, KGParseError, TransportError

FREEBASE_NS = "http://rdf.freebase.com/ns/"
LABEL_PREDICATES = {
    "http://www.w3.org/2000/01/rdf-schema#label",
    FREEBASE_NS + "type.object.name",
    "type.object.name",
}


class Direction(str, Enum):
    OUTGOING = "outgoing"
    INCOMING = "incoming"


@dataclass(frozen=True, eq=False)
class EntityRef:
    """A graph node: opaque id (e.g. a Freebase MID) plus an optional label.

    Identity is the id alone; labels are display metadata and do not
    participate in equality or hashing.
    """

    id: str
    label: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("EntityRef.id must be non-empty")

    def __eq__(self, other):
        if not isinstance(other, EntityRef):
            return NotImplemented
        return self.id == other.id

    def __hash__(self):
        return hash(self.id)

    @property
    def display(self) -> str:
        return self.label if self.label else self.id


@dataclass(frozen=True)
class Relation:
    """A relation name tagged with the direction it is traversed in."""

    name: str
    direction: Direction = Direction.OUTGOING

    def __post_init__(self):
        if not self.name or re.search(r"\s", self.name):
            raise ValueError(f"invalid relation name: {self.name!r}")


@dataclass(frozen=True)
class Triple:
    """One directed labeled edge of the knowledge graph."""

    head: EntityRef
    relation: str
    tail: EntityRef

    def __post_init__(self):
        if not self.relation:
            raise ValueError("Triple.relation must be non-empty")


class KnowledgeGraph(Protocol):
    def relation_search(self, entity: EntityRef, direction: Direction | None = None) -> list[Relation]: ...

    def entity_search(self, entity: EntityRef, relation: Relation) -> list[EntityRef]: ...

    def resolve_label(self, entity_id: str) -> str | None: ...


# --------------------------------------------------------------------------
# In-memory backend


def _parse_tsv(lines: Iterable[str], path: str | None) -> tuple[list[tuple[str, str, str]], dict[str, str]]:
    """Parse ``head_id<TAB>head_label<TAB>relation<TAB>tail_id<TAB>tail_label`` lines."""
    edges: list[tuple[str, str, str]] = []
    labels: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise KGParseError(
                f"expected 5 tab-separated fields, got {len(fields)}", line_number=lineno, path=path
            )
        head_id, head_label, rel, tail_id, tail_label = (f.strip() for f in fields)
        if not head_id or not rel or not tail_id:
            raise KGParseError("empty head id, relation, or tail id", line_number=lineno, path=path)
        if re.search(r"\s", rel):
            raise KGParseError(f"relation contains whitespace: {rel!r}", line_number=lineno, path=path)
        if head_label:
            labels.setdefault(head_id, head_label)
        if tail_label:
            labels.setdefault(tail_id, tail_label)
        edges.append((head_id, rel, tail_id))
    return edges, labels


_NT_LINE = re.compile(
    r"^\s*(<[^>]*>|\"(?:[^\"\\]|\\.)*\")\s+(<[^>]*>)\s+(<[^>]*>|\"(?:[^\"\\]|\\.)*\")\s*\.\s*$"
)


def _nt_term(term: str) -> tuple[str, bool]:
    """Return (value, is_literal) for an N-Triples term, stripping the Freebase prefix."""
    if term.startswith("<"):
        iri = term[1:-1]
        if iri.startswith(FREEBASE_NS):
            iri = iri[len(FREEBASE_NS):]
        return iri, False
    text = term[1:-1]
    text = text.replace('\\"', '"').replace("\\\\", "\\")
    return text, True


def _parse_ntriples(lines: Iterable[str], path: str | None) -> tuple[list[tuple[str, str, str]], dict[str, str]]:
    edges: list[tuple[str, str, str]] = []
    labels: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _NT_LINE.match(line)
        if m is None:
            raise KGParseError("line is not a <s> <p> <o> . statement", line_number=lineno, path=path)
        subj, is_lit_s = _nt_term(m.group(1))
        pred, _ = _nt_term(m.group(2))
        obj, is_lit_o = _nt_term(m.group(3))
        if is_lit_s:
            raise KGParseError("literal subjects are not supported", line_number=lineno, path=path)
        if not subj or not pred or not obj:
            raise KGParseError("empty term", line_number=lineno, path=path)
        if pred in LABEL_PREDICATES:
            labels.setdefault(subj, obj)
            continue
        if is_lit_o:
            # Literal objects become leaf entities keyed by their own text.
            labels.setdefault(obj, obj)
        edges.append((subj, pred, obj))
    return edges, labels


_DIR_ORDER = {Direction.OUTGOING: 0, Direction.INCOMING: 1}


class InMemoryKG:
    """Triple store over flat files, indexed by head and tail id.

    Loading replaces prior contents and is exclusive; all query methods are
    read-only and safe for concurrent use once loading has returned.
    """

    def __init__(self):
        self._triples: list[tuple[str, str, str]] = []
        self._by_head: dict[str, list[int]] = {}
        self._by_tail: dict[str, list[int]] = {}
        self._labels: dict[str, str] = {}
        self._by_label: dict[str, list[str]] = {}
        self._load_lock = threading.Lock()

    def load_triples(self, source: str | Path | IO[str], format: str = "tsv") -> int:
        if format not in ("tsv", "ntriples-subset"):
            raise ValueError(f"unknown format: {format!r}")
        if hasattr(source, "read"):
            lines = source.read().splitlines(keepends=True)
            path = None
        else:
            path = str(source)
            with open(source, encoding="utf-8") as fh:
                lines = fh.readlines()
        parser = _parse_tsv if format == "tsv" else _parse_ntriples
        edges, labels = parser(lines, path)

        seen: set[tuple[str, str, str]] = set()
        unique: list[tuple[str, str, str]] = []
        for edge in edges:
            if edge not in seen:
                seen.add(edge)
                unique.append(edge)
        by_head: dict[str, list[int]] = {}
        by_tail: dict[str, list[int]] = {}
        for i, (h, _, t) in enumerate(unique):
            by_head.setdefault(h, []).append(i)
            by_tail.setdefault(t, []).append(i)
        by_label: dict[str, list[str]] = {}
        for entity_id, label in labels.items():
            by_label.setdefault(label, []).append(entity_id)

        with self._load_lock:
            self._triples = unique
            self._by_head = by_head
            self._by_tail = by_tail
            self._labels = labels
            self._by_label = by_label
        return len(unique)

    def __len__(self) -> int:
        return len(self._triples)

    def _ref(self, entity_id: str) -> EntityRef:
        return EntityRef(entity_id, self._labels.get(entity_id))

    def triples(self) -> list[Triple]:
        return [Triple(self._ref(h), r, self._ref(t)) for h, r, t in self._triples]

    def relation_search(self, entity: EntityRef, direction: Direction | None = None) -> list[Relation]:
        found: set[Relation] = set()
        if direction in (None, Direction.OUTGOING):
            for i in self._by_head.get(entity.id, ()):
                found.add(Relation(self._triples[i][1], Direction.OUTGOING))
        if direction in (None, Direction.INCOMING):
            for i in self._by_tail.get(entity.id, ()):
                found.add(Relation(self._triples[i][1], Direction.INCOMING))
        return sorted(found, key=lambda r: (_DIR_ORDER[r.direction], r.name))

    def entity_search(self, entity: EntityRef, relation: Relation) -> list[EntityRef]:
        ids: set[str] = set()
        if relation.direction is Direction.OUTGOING:
            for i in self._by_head.get(entity.id, ()):
                h, r, t = self._triples[i]
                if r == relation.name:
                    ids.add(t)
        else:
            for i in self._by_tail.get(entity.id, ()):
                h, r, t = self._triples[i]
                if r == relation.name:
                    ids.add(h)
        return [self._ref(i) for i in sorted(ids)]

    def resolve_label(self, entity_id: str) -> str | None:
        return self._labels.get(entity_id)

    def lookup_by_label(self, label: str) -> list[EntityRef]:
        """Entities whose stored label matches exactly; used by topic-entity fallback."""
        return [self._ref(i) for i in sorted(self._by_label.get(label, ()))]


# --------------------------------------------------------------------------
# SPARQL backend


class SparqlKG:
    """Client for a SPARQL 1.1 endpoint holding Freebase-style RDF.

    Entity ids are bare MIDs; they are wrapped in the Freebase namespace for
    queries and results are stripped back.  Label lookups are cached for the
    process lifetime.  Concurrent requests are bounded by ``max_in_flight``.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 15.0,
        retries: int = 2,
        backoff_base: float = 0.5,
        max_in_flight: int = 4,
        namespace: str = FREEBASE_NS,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff_base = backoff_base
        self.namespace = namespace
        self.query_count = 0
        self._session = session or requests.Session()
        self._label_cache: dict[str, str | None] = {}
        self._cache_lock = threading.Lock()
        self._gate = threading.Semaphore(max_in_flight)

    # -- transport

    def _select(self, query: str) -> list[dict]:
        attempts = 0
        last_exc: Exception | None = None
        while attempts <= self.retries:
            attempts += 1
            try:
                with self._gate:
                    self.query_count += 1
                    resp = self._session.post(
                        self.endpoint,
                        data={"query": query},
                        headers={"Accept": "application/sparql-results+json"},
                        timeout=self.timeout,
                    )
            except requests.RequestException as exc:
                last_exc = exc
                if attempts <= self.retries:
                    time.sleep(self.backoff_base * (2 ** (attempts - 1)))
                continue
            if resp.status_code == 200:
                try:
                    return resp.json()["results"]["bindings"]
                except (ValueError, KeyError) as exc:
                    raise ApiError("malformed SPARQL JSON results", status=200, body_excerpt=resp.text) from exc
            if resp.status_code in (429,) or resp.status_code >= 500:
                last_exc = ApiError("retryable SPARQL failure", resp.status_code, resp.text)
                if attempts <= self.retries:
                    time.sleep(self.backoff_base * (2 ** (attempts - 1)))
                continue
            raise ApiError("SPARQL endpoint rejected the query", resp.status_code, resp.text)
        raise TransportError(f"SPARQL endpoint unreachable: {last_exc}", attempts=attempts)

    def _iri(self, local: str) -> str:
        if local.startswith("http://") or local.startswith("https://"):
            return f"<{local}>"
        return f"<{self.namespace}{local}>"

    def _strip(self, iri: str) -> str:
        return iri[len(self.namespace):] if iri.startswith(self.namespace) else iri

    # -- queries

    def relation_search(self, entity: EntityRef, direction: Direction | None = None) -> list[Relation]:
        found: set[Relation] = set()
        if direction in (None, Direction.OUTGOING):
            rows = self._select(f"SELECT DISTINCT ?r WHERE {{ {self._iri(entity.id)} ?r ?x . }}")
            for row in rows:
                found.add(Relation(self._strip(row["r"]["value"]), Direction.OUTGOING))
        if direction in (None, Direction.INCOMING):
            rows = self._select(f"SELECT DISTINCT ?r WHERE {{ ?x ?r {self._iri(entity.id)} . }}")
            for row in rows:
                found.add(Relation(self._strip(row["r"]["value"]), Direction.INCOMING))
        return sorted(found, key=lambda r: (_DIR_ORDER[r.direction], r.name))

    def entity_search(self, entity: EntityRef, relation: Relation) -> list[EntityRef]:
        rel_iri = self._iri(relation.name)
        ent_iri = self._iri(entity.id)
        if relation.direction is Direction.OUTGOING:
            pattern = f"{ent_iri} {rel_iri} ?e ."
        else:
            pattern = f"?e {rel_iri} {ent_iri} ."
        query = (
            "SELECT DISTINCT ?e ?name WHERE { "
            + pattern
            + f" OPTIONAL {{ ?e {self._iri('type.object.name')} ?name . "
            + 'FILTER(LANG(?name) = "en" || LANG(?name) = "") } }'
        )
        refs: dict[str, EntityRef] = {}
        for row in self._select(query):
            value = row["e"]["value"]
            if row["e"].get("type") == "literal":
                entity_id = value
                label: str | None = value
            else:
                entity_id = self._strip(value)
                label = row.get("name", {}).get("value")
            if entity_id not in refs:
                refs[entity_id] = EntityRef(entity_id, label)
        return [refs[i] for i in sorted(refs)]

    def resolve_label(self, entity_id: str) -> str | None:
        with self._cache_lock:
            if entity_id in self._label_cache:
                return self._label_cache[entity_id]
        query = (
            "SELECT ?name WHERE { "
            + f"{self._iri(entity_id)} {self._iri('type.object.name')} ?name . "
            + 'FILTER(LANG(?name) = "en" || LANG(?name) = "") } LIMIT 1'
        )
        rows = self._select(query)
        label = rows[0]["name"]["value"] if rows else None
        with self._cache_lock:
            self._label_cache[entity_id] = label
        return label
