"""Shared fixtures: deterministic galleries, triplets, and mock endpoints."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from cirloop.gallery import EmbeddingGallery, GalleryEntry, normalize
from cirloop.synthetic import make_random_gallery


@pytest.fixture
def small_gallery() -> EmbeddingGallery:
    return make_random_gallery(20, 8, seed=7, gallery_id="small")


@pytest.fixture
def axis_gallery() -> EmbeddingGallery:
    """d=4 gallery whose vectors are the unit axes (hand-checkable scores)."""
    entries = [
        GalleryEntry("ax0", normalize(np.array([1.0, 0, 0, 0]))),
        GalleryEntry("ax1", normalize(np.array([0, 1.0, 0, 0]))),
        GalleryEntry("ax2", normalize(np.array([0, 0, 1.0, 0]))),
        GalleryEntry("ax3", normalize(np.array([0, 0, 0, 1.0]))),
    ]
    return EmbeddingGallery("axes", 4, entries)


class _MockHandler(BaseHTTPRequestHandler):
    """Programmable JSON endpoint; the server records every request body."""

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length) or b"{}")
        self.server.requests.append({"path": self.path, "body": body})
        status, payload = self.server.responder(self.path, body)
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


class MockEndpoint:
    def __init__(self, responder):
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), _MockHandler)
        self.server.responder = responder
        self.server.requests = []
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    @property
    def requests(self) -> list[dict]:
        return self.server.requests

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def mock_endpoint():
    servers = []

    def start(responder) -> MockEndpoint:
        endpoint = MockEndpoint(responder)
        servers.append(endpoint)
        return endpoint

    yield start
    for endpoint in servers:
        endpoint.close()
