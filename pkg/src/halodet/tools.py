"""The four aspect-oriented evidence tools and their shared contracts.

Each family (object detection, attribute answering, scene-text reading,
fact search) has a protocol, a live HTTP client, a deterministic mock
keyed by request digest, and a null implementation that always returns
nothing (so ablations are a config change). The module-level operations
(:func:`detect_objects` etc.) enforce the family's postconditions (label
vocabulary, box validity, deterministic ordering) regardless of backend.

:func:`format_evidence_sections` turns a collected bundle into the four
text blocks the verification prompts bind; empty families render exactly
``none information``.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import requests

from .errors import AuthFailure, BackendUnavailable, InvalidImage, QuotaExceeded
from .gateway import DecodeParams, ModelGateway, ModelRequest, PurposeTag, TokenBucket
from .hashing import sha256_json
from .model import (
    AttributeEvidence,
    EvidenceBundle,
    ImageRef,
    NormBox,
    ObjectEvidence,
    SceneTextEvidence,
    validate_norm_box,
)
from .prompts import SupplementalId, render

NONE_INFORMATION = "none information"

# One fact block is clipped here after formatting; a marker shows the cut.
FACT_BLOCK_CHAR_LIMIT = 2000
DEFAULT_DETECTOR_THRESHOLD = 0.35
DEFAULT_FACT_TOP_K = 3


@dataclass(frozen=True)
class FactSnippet:
    """One search hit: title, snippet text, and where it came from."""

    title: str
    snippet: str
    source_url: str

    def __post_init__(self) -> None:
        if not self.snippet:
            raise ValueError("snippet must be non-empty")


class ObjectDetector(Protocol):
    backend_id: str

    def detect(self, image: ImageRef, labels: Sequence[str]) -> list[ObjectEvidence]: ...


class AttributeAnswerer(Protocol):
    backend_id: str

    def answer(self, image: ImageRef, question: str) -> AttributeEvidence: ...


class SceneTextReader(Protocol):
    backend_id: str

    def read(self, image: ImageRef) -> list[SceneTextEvidence]: ...


class FactSearcher(Protocol):
    backend_id: str

    def search(self, question: str, top_k: int) -> list[FactSnippet]: ...


@dataclass
class ToolBackendSet:
    """The four tool slots; every slot must be populated (null tools count)."""

    object_detector: ObjectDetector
    attribute_answerer: AttributeAnswerer
    scene_text_reader: SceneTextReader
    fact_searcher: FactSearcher

    def backend_ids(self) -> dict[str, str]:
        return {
            "object_detector": self.object_detector.backend_id,
            "attribute_answerer": self.attribute_answerer.backend_id,
            "scene_text_reader": self.scene_text_reader.backend_id,
            "fact_searcher": self.fact_searcher.backend_id,
        }


# --- family operations (backend-independent postconditions) -----------------


def detect_objects(
    detector: ObjectDetector, image: ImageRef, labels: Sequence[str]
) -> list[ObjectEvidence]:
    """Detect the requested vocabulary in the image.

    Results are restricted to the requested labels (case-insensitive),
    box-validated, deduplicated, and sorted by (label, x1, y1) so output
    order never depends on backend return order.
    """
    if not labels:
        raise ValueError("labels must be non-empty")
    if not image.digest:
        raise InvalidImage("image reference carries no digest")
    wanted = {label.lower() for label in labels}
    results = []
    for item in detector.detect(image, list(labels)):
        if item.label.lower() not in wanted:
            continue
        if not validate_norm_box(item.box):
            raise ValueError(f"detector returned an invalid box: {item.box}")
        results.append(item)
    unique = sorted(set(results), key=lambda e: (e.label, e.box.x1, e.box.y1))
    return unique


def answer_attribute(
    image: ImageRef, question: str, gateway: ModelGateway
) -> AttributeEvidence:
    """Ask the underlying model one attribute question about the image."""
    if not question:
        raise ValueError("question must be non-empty")
    prompt = render(SupplementalId.ATTRIBUTE_ANSWER, {"question": question}, [image])
    response = gateway.complete(
        ModelRequest(prompt=prompt, decode_params=DecodeParams(),
                     purpose_tag=PurposeTag.ATTRIBUTE_ANSWER)
    )
    return AttributeEvidence(question=question, answer=response.text)


def read_scene_text(reader: SceneTextReader, image: ImageRef) -> list[SceneTextEvidence]:
    """Read scene text; items sorted top-to-bottom then left-to-right."""
    if not image.digest:
        raise InvalidImage("image reference carries no digest")
    results = []
    for item in reader.read(image):
        if not validate_norm_box(item.box):
            raise ValueError(f"scene-text reader returned an invalid box: {item.box}")
        results.append(item)
    return sorted(set(results), key=lambda e: (e.box.y1, e.box.x1, e.text))


def search_facts(searcher: FactSearcher, question: str, top_k: int) -> list[FactSnippet]:
    """Search one fact question; at most top_k hits, provider order kept."""
    if not question:
        raise ValueError("question must be non-empty")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    return list(searcher.search(question, top_k))[:top_k]


# --- evidence formatting -----------------------------------------------------


def format_float(value: float) -> str:
    """Coordinate rendering: up to 3 decimals, trailing zeros trimmed."""
    return f"{round(value, 3):g}"


def format_box(box: NormBox) -> str:
    coords = ", ".join(format_float(v) for v in (box.x1, box.y1, box.x2, box.y2))
    return f"[{coords}]"


def fact_snippet_line(snippet: FactSnippet) -> str:
    line = f"{snippet.title}: {snippet.snippet}" if snippet.title else snippet.snippet
    if snippet.source_url:
        line += f" ({snippet.source_url})"
    return line


def format_evidence_sections(evidence: EvidenceBundle) -> dict[str, str]:
    """Render the four expert-model blocks bound into verification prompts.

    Keys match the verification templates' slot names. Any family with no
    evidence renders exactly ``none information``.
    """
    if evidence.objects:
        object_block = "\n".join(
            f"{e.label} {format_box(e.box)}" for e in evidence.objects
        )
    else:
        object_block = NONE_INFORMATION

    if evidence.attributes:
        attribute_block = "\n".join(
            f"question: {e.question}\nanswer: {e.answer}" for e in evidence.attributes
        )
    else:
        attribute_block = NONE_INFORMATION

    if evidence.scene_texts:
        scene_block = "\n".join(
            f"{e.text} {format_box(e.box)}" for e in evidence.scene_texts
        )
    else:
        scene_block = NONE_INFORMATION

    if evidence.facts:
        blocks = []
        for fact in evidence.facts:
            lines = [f"question: {fact.question}"]
            if fact.snippets:
                lines.extend(f"{i}. {text}" for i, text in enumerate(fact.snippets, start=1))
            else:
                lines.append("(no results)")
            block = "\n".join(lines)
            if len(block) > FACT_BLOCK_CHAR_LIMIT:
                block = block[:FACT_BLOCK_CHAR_LIMIT] + " ..."
            blocks.append(block)
        fact_block = "\n".join(blocks)
    else:
        fact_block = NONE_INFORMATION

    return {
        "object_evidence": object_block,
        "attribute_evidence": attribute_block,
        "scene_text_evidence": scene_block,
        "fact_evidence": fact_block,
    }


# --- mock backends ------------------------------------------------------------

# Mock fixtures may carry {"error": <name>} to script a failure instead of
# returning evidence.
_SCRIPTED_ERRORS = {
    "invalid-image": InvalidImage,
    "unavailable": BackendUnavailable,
    "quota": QuotaExceeded,
}


def object_detect_key(image: ImageRef, labels: Sequence[str]) -> str:
    return sha256_json({
        "tool": "object-detect",
        "image": image.digest,
        "labels": sorted({label.lower() for label in labels}),
    })


def scene_text_key(image: ImageRef) -> str:
    return sha256_json({"tool": "scene-text", "image": image.digest})


def fact_search_key(question: str) -> str:
    return sha256_json({"tool": "fact-search", "question": question.strip()})


def attribute_key(image: ImageRef, question: str) -> str:
    return sha256_json({
        "tool": "attribute",
        "image": image.digest,
        "question": question.strip(),
    })


class _MockTool:
    """Shared fixture-lookup behavior: a missing fixture means no evidence."""

    def __init__(self, fixture_dir: str | Path | None, table: dict | None,
                 backend_id: str) -> None:
        self._fixture_dir = Path(fixture_dir) if fixture_dir is not None else None
        self._table = dict(table) if table is not None else {}
        self.backend_id = backend_id
        self.calls = 0
        self._lock = threading.Lock()

    def _lookup(self, digest: str):
        with self._lock:
            self.calls += 1
        if digest in self._table:
            return self._table[digest]
        if self._fixture_dir is not None:
            path = self._fixture_dir / f"{digest}.json"
            if path.exists():
                payload = json.loads(path.read_text("utf-8"))
                error = payload.get("error")
                if error is not None:
                    raise _SCRIPTED_ERRORS[error](f"scripted {error} failure")
                return payload["items"]
        return None

    @staticmethod
    def write_fixture(fixture_dir: str | Path, digest: str, items,
                      note: str = "") -> None:
        directory = Path(fixture_dir)
        directory.mkdir(parents=True, exist_ok=True)
        payload = {"items": items, "note": note}
        (directory / f"{digest}.json").write_text(
            json.dumps(payload, ensure_ascii=False, indent=2) + "\n", "utf-8"
        )


class MockObjectDetector(_MockTool):
    def __init__(self, fixture_dir: str | Path | None = None,
                 table: dict[str, list[ObjectEvidence]] | None = None) -> None:
        super().__init__(fixture_dir, table, "mock-object-detector")

    def detect(self, image: ImageRef, labels: Sequence[str]) -> list[ObjectEvidence]:
        items = self._lookup(object_detect_key(image, labels))
        if items is None:
            return []
        return [
            item if isinstance(item, ObjectEvidence)
            else ObjectEvidence(label=item["label"], box=NormBox.from_json(item["box"]))
            for item in items
        ]


class MockSceneTextReader(_MockTool):
    def __init__(self, fixture_dir: str | Path | None = None,
                 table: dict[str, list[SceneTextEvidence]] | None = None) -> None:
        super().__init__(fixture_dir, table, "mock-scene-text")

    def read(self, image: ImageRef) -> list[SceneTextEvidence]:
        items = self._lookup(scene_text_key(image))
        if items is None:
            return []
        return [
            item if isinstance(item, SceneTextEvidence)
            else SceneTextEvidence(text=item["text"], box=NormBox.from_json(item["box"]))
            for item in items
        ]


class MockFactSearcher(_MockTool):
    def __init__(self, fixture_dir: str | Path | None = None,
                 table: dict[str, list[FactSnippet]] | None = None) -> None:
        super().__init__(fixture_dir, table, "mock-fact-search")

    def search(self, question: str, top_k: int) -> list[FactSnippet]:
        items = self._lookup(fact_search_key(question))
        if items is None:
            return []
        snippets = [
            item if isinstance(item, FactSnippet)
            else FactSnippet(title=item["title"], snippet=item["snippet"],
                             source_url=item["source_url"])
            for item in items
        ]
        return snippets[:top_k]


class MockAttributeAnswerer(_MockTool):
    def __init__(self, fixture_dir: str | Path | None = None,
                 table: dict[str, str] | None = None) -> None:
        super().__init__(fixture_dir, table, "mock-attribute")

    def answer(self, image: ImageRef, question: str) -> AttributeEvidence:
        answer = self._lookup(attribute_key(image, question))
        if answer is None:
            return AttributeEvidence(question=question, answer=NONE_INFORMATION)
        return AttributeEvidence(question=question, answer=str(answer))

    @staticmethod
    def write_answer(fixture_dir: str | Path, digest: str, answer: str) -> None:
        _MockTool.write_fixture(fixture_dir, digest, answer)


class GatewayAttributeAnswerer:
    """Live attribute answering: the underlying model reflecting on the image."""

    def __init__(self, gateway: ModelGateway) -> None:
        self._gateway = gateway
        self.backend_id = f"gateway:{gateway.backend.backend_id}"

    def answer(self, image: ImageRef, question: str) -> AttributeEvidence:
        return answer_attribute(image, question, self._gateway)


# --- null tools -----------------------------------------------------------------


class NullObjectDetector:
    backend_id = "null"

    def detect(self, image: ImageRef, labels: Sequence[str]) -> list[ObjectEvidence]:
        return []


class NullSceneTextReader:
    backend_id = "null"

    def read(self, image: ImageRef) -> list[SceneTextEvidence]:
        return []


class NullFactSearcher:
    backend_id = "null"

    def search(self, question: str, top_k: int) -> list[FactSnippet]:
        return []


class NullAttributeAnswerer:
    backend_id = "null"

    def answer(self, image: ImageRef, question: str) -> AttributeEvidence:
        return AttributeEvidence(question=question, answer=NONE_INFORMATION)


# --- live HTTP clients -----------------------------------------------------------


def _normalize_box(raw: Sequence[float], width: float | None, height: float | None) -> NormBox:
    x1, y1, x2, y2 = (float(v) for v in raw)
    if width and height:
        x1, x2 = x1 / width, x2 / width
        y1, y2 = y1 / height, y2 / height
    return NormBox(x1=x1, y1=y1, x2=x2, y2=y2)


class _HttpToolClient:
    # Each live client carries its own admission rate limiter.
    def __init__(self, endpoint: str, api_key: str | None = None,
                 timeout: float = 30.0,
                 requests_per_minute: float | None = None,
                 session: requests.Session | None = None) -> None:
        self.endpoint = endpoint
        self._timeout = timeout
        self._session = session or requests.Session()
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._rate_limiter = (
            TokenBucket(requests_per_minute) if requests_per_minute else None
        )

    def _post(self, payload: dict) -> dict:
        if self._rate_limiter is not None:
            self._rate_limiter.acquire()
        try:
            response = self._session.post(
                self.endpoint, json=payload, headers=self._headers, timeout=self._timeout
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(f"{self.endpoint} unreachable: {exc}") from exc
        if response.status_code in (401, 403):
            raise AuthFailure(f"{self.endpoint} rejected credentials")
        if response.status_code == 422:
            raise InvalidImage(f"{self.endpoint} rejected the image")
        if response.status_code == 429:
            raise QuotaExceeded(f"{self.endpoint} rate/quota limit hit")
        if response.status_code != 200:
            raise BackendUnavailable(f"{self.endpoint} returned {response.status_code}")
        try:
            return response.json()
        except ValueError as exc:
            raise BackendUnavailable(f"{self.endpoint} returned non-JSON body") from exc


class HttpObjectDetector(_HttpToolClient):
    """Open-set detector service client.

    Sends the requested label vocabulary with the image reference; drops
    detections scored below the confidence threshold; normalizes pixel
    boxes to fractions when the service reports image dimensions.
    """

    def __init__(self, endpoint: str, api_key: str | None = None,
                 threshold: float = DEFAULT_DETECTOR_THRESHOLD,
                 timeout: float = 30.0,
                 requests_per_minute: float | None = None,
                 session: requests.Session | None = None) -> None:
        super().__init__(endpoint, api_key, timeout, requests_per_minute, session)
        self.threshold = threshold
        self.backend_id = f"detector:{endpoint}"

    def detect(self, image: ImageRef, labels: Sequence[str]) -> list[ObjectEvidence]:
        body = self._post({
            "image": image.to_json(),
            "labels": list(labels),
            "threshold": self.threshold,
        })
        width = body.get("image_width")
        height = body.get("image_height")
        results = []
        for det in body.get("detections", []):
            score = float(det.get("score", 1.0))
            if score < self.threshold:
                continue
            results.append(ObjectEvidence(
                label=str(det["label"]),
                box=_normalize_box(det["box"], width, height),
            ))
        return results


class HttpSceneTextReader(_HttpToolClient):
    """OCR service client; returns recognized lines with normalized boxes."""

    def __init__(self, endpoint: str, api_key: str | None = None,
                 timeout: float = 30.0,
                 requests_per_minute: float | None = None,
                 session: requests.Session | None = None) -> None:
        super().__init__(endpoint, api_key, timeout, requests_per_minute, session)
        self.backend_id = f"scene-text:{endpoint}"

    def read(self, image: ImageRef) -> list[SceneTextEvidence]:
        body = self._post({"image": image.to_json()})
        width = body.get("image_width")
        height = body.get("image_height")
        return [
            SceneTextEvidence(text=str(line["text"]),
                              box=_normalize_box(line["box"], width, height))
            for line in body.get("lines", [])
        ]


class HttpFactSearcher:
    """Web-search client speaking the serper.dev request/response shape."""

    def __init__(self, api_key: str, endpoint: str = "https://google.serper.dev/search",
                 timeout: float = 30.0,
                 requests_per_minute: float | None = None,
                 session: requests.Session | None = None) -> None:
        if not api_key:
            raise AuthFailure("fact search requires an API key")
        self.endpoint = endpoint
        self.backend_id = f"search:{endpoint}"
        self._timeout = timeout
        self._session = session or requests.Session()
        self._headers = {"X-API-KEY": api_key, "Content-Type": "application/json"}
        self._rate_limiter = (
            TokenBucket(requests_per_minute) if requests_per_minute else None
        )

    def search(self, question: str, top_k: int) -> list[FactSnippet]:
        if self._rate_limiter is not None:
            self._rate_limiter.acquire()
        try:
            response = self._session.post(
                self.endpoint, json={"q": question}, headers=self._headers,
                timeout=self._timeout,
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(f"search endpoint unreachable: {exc}") from exc
        if response.status_code in (401, 403):
            raise AuthFailure("search endpoint rejected credentials")
        if response.status_code == 429:
            raise QuotaExceeded("search quota exhausted")
        if response.status_code != 200:
            raise BackendUnavailable(f"search endpoint returned {response.status_code}")
        body = response.json()
        snippets = []
        for hit in body.get("organic", [])[:top_k]:
            text = str(hit.get("snippet", "")).strip()
            if not text:
                continue
            snippets.append(FactSnippet(
                title=str(hit.get("title", "")),
                snippet=text,
                source_url=str(hit.get("link", "")),
            ))
        return snippets


def mock_backend_set(fixture_dir: str | Path) -> ToolBackendSet:
    """All four tools reading from one fixture directory tree."""
    root = Path(fixture_dir)
    return ToolBackendSet(
        object_detector=MockObjectDetector(fixture_dir=root / "object"),
        attribute_answerer=MockAttributeAnswerer(fixture_dir=root / "attribute"),
        scene_text_reader=MockSceneTextReader(fixture_dir=root / "scene_text"),
        fact_searcher=MockFactSearcher(fixture_dir=root / "facts"),
    )
