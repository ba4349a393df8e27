"""Uniform client contract for the underlying multimodal model.

One entry point, :meth:`ModelGateway.complete`, fronts whichever backend is
configured: a live HTTPS endpoint or a deterministic mock keyed by request
digest. The gateway owns retry (transient failures only) and admission-side
rate limiting; it never parses model output, which belongs to the pipeline
stage that issued the request.
"""

from __future__ import annotations

import json
import logging
import random
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol

import requests

from .errors import AuthFailure, BackendUnavailable, PayloadTooLarge
from .hashing import sha256_json
from .prompts import RenderedPrompt

logger = logging.getLogger(__name__)


class PurposeTag(Enum):
    EXTRACT = "extract"
    QUERY_FORMULATE = "query-formulate"
    ATTRIBUTE_ANSWER = "attribute-answer"
    VERIFY = "verify"
    SELF_CHECK = "self-check"


@dataclass(frozen=True)
class DecodeParams:
    """Sampling controls; temperature 0 everywhere by default for replayability."""

    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class ModelRequest:
    prompt: RenderedPrompt
    decode_params: DecodeParams = DecodeParams()
    purpose_tag: PurposeTag = PurposeTag.VERIFY


@dataclass(frozen=True)
class ModelResponse:
    text: str
    backend_id: str
    latency_ms: int
    attempt_count: int

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")
        if self.attempt_count < 1:
            raise ValueError("attempt_count must be >= 1")


def request_digest(request: ModelRequest) -> str:
    """Content identity of a request: prompt bytes, image digests, decoding.

    The purpose tag is deliberately excluded: two stages sending identical
    prompts must map to the same mock fixture and cache slot.
    """
    return sha256_json({
        "system": request.prompt.system,
        "user": request.prompt.user,
        "attachments": [ref.digest for ref in request.prompt.attachments],
        "temperature": request.decode_params.temperature,
        "max_output_tokens": request.decode_params.max_output_tokens,
    })


class ModelBackend(Protocol):
    """One raw model invocation; retries live above this interface."""

    backend_id: str

    def invoke(self, request: ModelRequest) -> str: ...


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff for transient failures: 3 tries at 1s/2s/4s + jitter."""

    attempts: int = 3
    base_delay: float = 1.0
    multiplier: float = 2.0
    jitter: float = 0.1

    def delay(self, attempt: int, rng: random.Random) -> float:
        base = self.base_delay * self.multiplier ** (attempt - 1)
        return base * (1.0 + rng.uniform(-self.jitter, self.jitter))


class TokenBucket:
    """Thread-safe token bucket; serializes admission, not execution."""

    def __init__(
        self,
        requests_per_minute: float,
        burst: int | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be > 0")
        self._rate = requests_per_minute / 60.0
        self._capacity = float(burst if burst is not None else max(1, int(requests_per_minute)))
        self._tokens = self._capacity
        self._clock = clock
        self._sleep = sleep
        self._updated = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self._capacity, self._tokens + (now - self._updated) * self._rate)
                self._updated = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self._rate
            self._sleep(wait)


class ModelGateway:
    """Retry/rate-limit wrapper around a backend, safe for concurrent calls."""

    def __init__(
        self,
        backend: ModelBackend,
        retry: RetryPolicy = RetryPolicy(),
        rate_limiter: TokenBucket | None = None,
        request_log: str | Path | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        self.backend = backend
        self.retry = retry
        self.rate_limiter = rate_limiter
        self._request_log = Path(request_log) if request_log is not None else None
        self._sleep = sleep
        self._rng = rng if rng is not None else random.Random()
        self._log_lock = threading.Lock()

    def complete(self, request: ModelRequest) -> ModelResponse:
        """Run one request to completion, retrying transient failures.

        The backend's text comes back verbatim apart from a trailing
        whitespace strip. AuthFailure and PayloadTooLarge are never retried;
        BackendUnavailable is retried up to the policy limit, then re-raised.
        """
        if self.rate_limiter is not None:
            self.rate_limiter.acquire()

        started = time.monotonic()
        attempt = 0
        while True:
            attempt += 1
            try:
                text = self.backend.invoke(request)
                break
            except (AuthFailure, PayloadTooLarge):
                raise
            except BackendUnavailable as exc:
                if attempt >= self.retry.attempts:
                    raise BackendUnavailable(
                        f"backend {self.backend.backend_id} failed after "
                        f"{attempt} attempts: {exc}"
                    ) from exc
                delay = self.retry.delay(attempt, self._rng)
                logger.debug("transient backend failure (attempt %d), retrying in %.2fs",
                             attempt, delay)
                self._sleep(delay)

        latency_ms = max(0, int(round((time.monotonic() - started) * 1000)))
        response = ModelResponse(
            text=text.rstrip(),
            backend_id=self.backend.backend_id,
            latency_ms=latency_ms,
            attempt_count=attempt,
        )
        self._log(request, response)
        return response

    def _log(self, request: ModelRequest, response: ModelResponse) -> None:
        if self._request_log is None:
            return
        record = {
            "digest": request_digest(request),
            "purpose": request.purpose_tag.value,
            "system": request.prompt.system,
            "user": request.prompt.user,
            "attachments": [ref.to_json() for ref in request.prompt.attachments],
            "temperature": request.decode_params.temperature,
            "max_output_tokens": request.decode_params.max_output_tokens,
            "backend_id": response.backend_id,
            "text": response.text,
        }
        line = json.dumps(record, ensure_ascii=False)
        with self._log_lock:
            with open(self._request_log, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")


# --- backends -----------------------------------------------------------------


@dataclass
class ScriptedModelBackend:
    """Unit-test backend: replays a fixed script of texts and exceptions."""

    script: list[str | Exception]
    backend_id: str = "scripted"
    calls: int = 0

    def invoke(self, request: ModelRequest) -> str:
        self.calls += 1
        if not self.script:
            raise BackendUnavailable("scripted backend exhausted")
        item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


class MockModelBackend:
    """Deterministic replay backend keyed by request digest.

    Responses come either from an in-memory mapping or from a fixture
    directory of ``<digest>.json`` files holding ``{"text": ...}``. A request
    whose digest has no fixture is an error, since a model reply cannot be
    defaulted.
    """

    def __init__(
        self,
        fixture_dir: str | Path | None = None,
        responses: dict[str, str] | None = None,
        backend_id: str = "mock-model",
    ) -> None:
        if fixture_dir is None and responses is None:
            raise ValueError("need a fixture directory or a response mapping")
        self._fixture_dir = Path(fixture_dir) if fixture_dir is not None else None
        self._responses = dict(responses) if responses is not None else {}
        self.backend_id = backend_id
        self.calls = 0
        self._lock = threading.Lock()

    def invoke(self, request: ModelRequest) -> str:
        with self._lock:
            self.calls += 1
        digest = request_digest(request)
        if digest in self._responses:
            return self._responses[digest]
        if self._fixture_dir is not None:
            path = self._fixture_dir / f"{digest}.json"
            if path.exists():
                return json.loads(path.read_text("utf-8"))["text"]
        raise BackendUnavailable(
            f"no mock fixture for request digest {digest} "
            f"(purpose {request.purpose_tag.value})"
        )

    @staticmethod
    def write_fixture(
        fixture_dir: str | Path,
        request: ModelRequest,
        text: str,
        note: str = "",
    ) -> str:
        """Materialize one fixture file; returns the request digest."""
        digest = request_digest(request)
        directory = Path(fixture_dir)
        directory.mkdir(parents=True, exist_ok=True)
        payload = {
            "text": text,
            "purpose": request.purpose_tag.value,
            "note": note,
        }
        (directory / f"{digest}.json").write_text(
            json.dumps(payload, ensure_ascii=False, indent=2) + "\n", "utf-8"
        )
        return digest


class HttpModelBackend:
    """Live backend spoken over HTTPS as a single JSON POST per request.

    Wire shape: ``{"model", "system", "user", "images": [...], "temperature",
    "max_output_tokens"}`` out, ``{"text": ...}`` back. Image attachments are
    passed by path/URL plus digest; uploading bytes is the endpoint's concern.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str,
        model: str = "",
        backend_id: str | None = None,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ) -> None:
        if not api_key:
            raise AuthFailure("model backend requires an API key")
        self.endpoint = endpoint
        self.model = model
        self.backend_id = backend_id or (model or endpoint)
        self._timeout = timeout
        self._session = session or requests.Session()
        self._headers = {"Authorization": f"Bearer {api_key}"}

    def invoke(self, request: ModelRequest) -> str:
        payload = {
            "model": self.model,
            "system": request.prompt.system,
            "user": request.prompt.user,
            "images": [ref.to_json() for ref in request.prompt.attachments],
            "temperature": request.decode_params.temperature,
            "max_output_tokens": request.decode_params.max_output_tokens,
        }
        try:
            response = self._session.post(
                self.endpoint, json=payload, headers=self._headers, timeout=self._timeout
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(f"model endpoint unreachable: {exc}") from exc
        if response.status_code in (401, 403):
            raise AuthFailure(f"model endpoint rejected credentials ({response.status_code})")
        if response.status_code == 413:
            raise PayloadTooLarge("model endpoint rejected request size")
        if response.status_code != 200:
            raise BackendUnavailable(f"model endpoint returned {response.status_code}")
        try:
            return str(response.json()["text"])
        except (ValueError, KeyError) as exc:
            raise BackendUnavailable(f"malformed model endpoint response: {exc}") from exc
