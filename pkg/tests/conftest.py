import json
import threading
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion.
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1].removeprefix("test_")
        print(f"\n[ACCEPTANCE] {name}: {'PASS' if report.passed else 'FAIL'}")

from kgbeam.evaluation import QuestionRecord
from kgbeam.kg import EntityRef, InMemoryKG

TOY_TSV = """\
# four-edge toy knowledge graph
m.nd\tNorthern District\tcountry\tm.il\tIsrael
m.nd\tNorthern District\tadministrative_parent\tm.il\tIsrael
m.il\tIsrael\tform_of_government\tm.ps\tParliamentary system
m.il\tIsrael\tadministrative_children\tm.nd\tNorthern District
"""

TOY_QUESTION = QuestionRecord(
    id="toy-1",
    question="What type of government is used in the country with Northern District?",
    topic_entities=(EntityRef("m.nd", "Northern District"),),
    answers=("Parliamentary system",),
)


@pytest.fixture
def toy_tsv(tmp_path):
    path = tmp_path / "toy.tsv"
    path.write_text(TOY_TSV, encoding="utf-8")
    return path


@pytest.fixture
def toy_kg(toy_tsv):
    store = InMemoryKG()
    store.load_triples(toy_tsv)
    return store


@pytest.fixture
def toy_question():
    return TOY_QUESTION


class _Handler(BaseHTTPRequestHandler):
    def _respond(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length).decode("utf-8") if length else ""
        try:
            status, payload = self.server.app(self.path, body, self.command)
        except Exception as exc:  # surface app bugs as 500s, not hangs
            status, payload = 500, {"error": str(exc)}
        data = payload if isinstance(payload, str) else json.dumps(payload)
        raw = data.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    do_POST = _respond
    do_GET = _respond

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    """Start tiny HTTP apps: app(path, body, method) -> (status, payload)."""
    servers = []

    def start(app):
        server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
        server.app = app
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        servers.append(server)
        return f"http://127.0.0.1:{server.server_port}"

    yield start
    for server in servers:
        server.shutdown()
        server.server_close()


def chat_app(script):
    """OpenAI-style chat mock; ``script`` maps prompt text to reply text."""

    def app(path, body, method):
        payload = json.loads(body)
        prompt = payload["messages"][-1]["content"]
        reply = script(prompt)
        return 200, {
            "choices": [{"message": {"role": "assistant", "content": reply}}],
            "usage": {"prompt_tokens": 1, "completion_tokens": 1},
        }

    return app


def flaky_chat_app(script, failures: int):
    """Fail the first ``failures`` requests with 503, then behave normally."""
    state = {"left": failures}
    inner = chat_app(script)

    def app(path, body, method):
        if state["left"] > 0:
            state["left"] -= 1
            return 503, {"error": "temporarily unavailable"}
        return inner(path, body, method)

    return app


def sparql_app(triples, labels, counter=None):
    """Serve the handful of SELECT shapes the SPARQL client issues."""
    ns = "http://rdf.freebase.com/ns/"

    def bindings(rows):
        return {"results": {"bindings": rows}}

    def app(path, body, method):
        if counter is not None:
            counter["requests"] = counter.get("requests", 0) + 1
        query = urllib.parse.parse_qs(body).get("query", [""])[0]

        def iri_of(entity_id):
            return f"<{ns}{entity_id}>"

        if "?r ?x" in query:
            eid = query.split(f"<{ns}", 1)[1].split(">", 1)[0]
            rows = sorted({r for h, r, t in triples if h == eid})
            return 200, bindings([{"r": {"type": "uri", "value": ns + r}} for r in rows])
        if "?x ?r" in query:
            eid = query.split(f"<{ns}", 1)[1].split(">", 1)[0]
            rows = sorted({r for h, r, t in triples if t == eid})
            return 200, bindings([{"r": {"type": "uri", "value": ns + r}} for r in rows])
        if "SELECT ?name" in query:
            eid = query.split(f"<{ns}", 1)[1].split(">", 1)[0]
            label = labels.get(eid)
            rows = [{"name": {"type": "literal", "value": label}}] if label else []
            return 200, bindings(rows)
        if "SELECT DISTINCT ?e ?name" in query:
            head = query.split("WHERE { ", 1)[1]
            pattern = head.split(" .", 1)[0]
            parts = pattern.split()
            rows = []
            if parts[0] == "?e":
                rel = parts[1][1:-1].removeprefix(ns)
                eid = parts[2][1:-1].removeprefix(ns)
                found = sorted({h for h, r, t in triples if t == eid and r == rel})
            else:
                eid = parts[0][1:-1].removeprefix(ns)
                rel = parts[1][1:-1].removeprefix(ns)
                found = sorted({t for h, r, t in triples if h == eid and r == rel})
            for fid in found:
                row = {"e": {"type": "uri", "value": ns + fid}}
                if labels.get(fid):
                    row["name"] = {"type": "literal", "value": labels[fid]}
                rows.append(row)
            return 200, bindings(rows)
        return 400, {"error": f"unrecognized query: {query}"}

    return app
