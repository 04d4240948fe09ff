import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from aui import catalog as catalog_mod
from aui import synth
from aui.catalog import CatalogSource, Period


class FixtureServer:
    """Tiny HTTP server replaying canned responses for catalog/backend tests.

    Routes are (method, path) -> list of responses consumed in order; the
    last response repeats. A response is (status, content_type, body_bytes).
    Requests are recorded for assertions.
    """

    def __init__(self):
        self.routes = {}
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _serve(self, method):
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                outer.requests.append(
                    {
                        "method": method,
                        "path": self.path,
                        "headers": dict(self.headers),
                        "body": body,
                    }
                )
                key = (method, self.path.split("?")[0])
                queue = outer.routes.get(key)
                if not queue:
                    self.send_response(404)
                    self.end_headers()
                    return
                status, ctype, payload = queue[0] if len(queue) == 1 else queue.pop(0)
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def do_GET(self):
                self._serve("GET")

            def do_POST(self):
                self._serve("POST")

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def base_url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def add_json(self, path, doc, *, method="GET", status=200):
        body = json.dumps(doc).encode()
        self.routes.setdefault((method, path), []).append(
            (status, "application/json", body)
        )

    def add_bytes(self, path, payload, *, method="GET", status=200):
        self.routes.setdefault((method, path), []).append(
            (status, "application/octet-stream", payload)
        )

    def add_error(self, path, *, method="GET", status=500, times=1):
        for _ in range(times):
            self.routes.setdefault((method, path), []).insert(
                0, (status, "text/plain", b"error")
            )

    def reset(self):
        self.routes.clear()
        self.requests.clear()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def fixture_server():
    server = FixtureServer()
    yield server
    server.close()


@pytest.fixture(autouse=True)
def _fast_http_retries(monkeypatch):
    # Keep transport-retry tests quick; retry counts stay untouched.
    monkeypatch.setattr(catalog_mod, "HTTP_BACKOFF_S", 0.0)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """2 cells x 4 periods of synthetic scenes behind a local catalog."""
    root = tmp_path_factory.mktemp("corpus")
    periods = Period.range_inclusive("2016-01", "2017-07")
    synth.write_corpus(root, ["tdr70", "tdr0t"], periods, base_seed=11)
    return root


@pytest.fixture(scope="session")
def small_corpus_source(small_corpus):
    return CatalogSource.local(small_corpus)
