"""Retrying JSON-over-HTTP client for model endpoints.

All remote calls (composer, captioner, generator, direct-diff) go through
one client with a bounded in-flight pool, a per-request timeout, and
exponential backoff on transient failures (connection errors, timeouts,
429/5xx). Anything still failing after the retry budget surfaces as
TransportError; non-retryable HTTP statuses surface immediately.
"""

from __future__ import annotations

import threading
import time

import requests

from .errors import TransportError

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class JsonHttpClient:
    """POSTs JSON payloads and returns JSON bodies, retrying transient failures."""

    def __init__(
        self,
        timeout_s: float = 30.0,
        retries: int = 2,
        backoff_base_s: float = 0.5,
        max_in_flight: int = 8,
        session: requests.Session | None = None,
        sleep=time.sleep,
    ):
        self.timeout_s = timeout_s
        self.retries = retries
        self.backoff_base_s = backoff_base_s
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._session = session or requests.Session()
        self._sleep = sleep

    def post_json(self, url: str, payload: dict) -> dict:
        """POST payload to url; return the parsed JSON body.

        Raises:
            TransportError: connection/timeout/retryable-status failures
                persisting past the retry budget, non-JSON bodies, or a
                non-retryable error status.
        """
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt > 0:
                self._sleep(self.backoff_base_s * (2 ** (attempt - 1)))
            try:
                with self._gate:
                    resp = self._session.post(url, json=payload, timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last_error = TransportError(f"{url}: HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise TransportError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise TransportError(f"{url}: non-JSON response body") from exc
        raise TransportError(
            f"{url}: failed after {self.retries + 1} attempts: {last_error}"
        ) from last_error
