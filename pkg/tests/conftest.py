from __future__ import annotations

import hashlib
import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

COUNT_RE = re.compile(r"Write exactly (\d+) new instructions")


class MockTeacherHandler(BaseHTTPRequestHandler):
    """Deterministic OpenAI-compatible chat + embeddings endpoint.

    Chat replies are a pure function of the request prompt: a JSON array
    of exactly the requested number of instruction/input objects, tagged
    with a prompt digest so distinct clusters get distinct but
    reproducible queries. Prompts containing FAILME get a 500.
    Embedding replies hash each text into a fixed 24-dim vector.
    """

    def _send_json(self, doc: dict) -> None:
        reply = json.dumps(doc).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(reply)))
        self.end_headers()
        self.wfile.write(reply)

    def do_POST(self):  # noqa: N802 (http.server API)
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        if self.path.endswith("/embeddings"):
            data = []
            for i, text in enumerate(body["input"]):
                digest = hashlib.sha256(text.encode("utf-8")).digest()
                vec = [(b - 127.5) / 127.5 for b in digest[:24]]
                data.append({"index": i, "embedding": vec})
            self._send_json({"data": data})
            return
        prompt = body["messages"][0]["content"]
        if "FAILME" in prompt:
            self.send_response(500)
            self.end_headers()
            self.wfile.write(b"injected failure")
            return
        match = COUNT_RE.search(prompt)
        count = int(match.group(1)) if match else 1
        digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:10]
        items = [
            {"instruction": f"Generated task {digest} variant {i}", "input": ""}
            for i in range(count)
        ]
        self._send_json(
            {"choices": [{"message": {"role": "assistant", "content": json.dumps(items)}}]}
        )

    def log_message(self, *args):  # keep test output quiet
        pass


class AlwaysFailHandler(MockTeacherHandler):
    def do_POST(self):  # noqa: N802
        length = int(self.headers.get("Content-Length", 0))
        self.rfile.read(length)
        self.send_response(500)
        self.end_headers()
        self.wfile.write(b"down")


def _serve(handler) -> tuple[str, ThreadingHTTPServer]:
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return f"http://127.0.0.1:{server.server_address[1]}/v1", server


@pytest.fixture
def mock_teacher():
    url, server = _serve(MockTeacherHandler)
    yield url
    server.shutdown()


@pytest.fixture
def failing_teacher():
    url, server = _serve(AlwaysFailHandler)
    yield url
    server.shutdown()


@pytest.fixture
def tiny_dataset() -> bytes:
    records = [
        {"instruction": "Name a color", "input": "", "output": "red"},
        {"instruction": "Summarize:", "input": "a very long text", "output": ""},
        {"instruction": "Translate to French", "input": "hello"},
    ]
    return json.dumps(records).encode("utf-8")


def make_topic_dataset(topics: int, per_topic: int) -> bytes:
    """Synthetic instruction dataset with clusterable topical structure."""
    verbs = ["Describe", "Explain", "Summarize", "List facts about", "Compare notes on"]
    records = []
    for t in range(topics):
        for v in range(per_topic):
            records.append(
                {
                    "instruction": f"{verbs[v % len(verbs)]} topic-{t} item {v} in detail",
                    "input": "" if v % 3 else f"context snippet {t}-{v}",
                    "output": "",
                }
            )
    return json.dumps(records).encode("utf-8")
