"""End-to-end orchestration of detection runs.

One pair flows through claim handling, query formulation, a concurrent tool
fan-out, and a single verification call; verification starts only after every
planned tool call has settled. Evidence merge order is fixed (object, then
attribute, then scene text, then fact, ordered inside each family by claim
index then query index), so results are invariant under scheduling.

Every backend call is routed through one cache-and-trace choke point:
identical mock runs are byte-identical whether cache-cold, cache-warm, or at
any parallelism width, and the trace records exactly one entry per backend
invocation.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

from .cache import CacheKey, DiskCache
from .errors import ConfigInvalid
from .gateway import ModelGateway, ModelRequest, ModelResponse, request_digest
from .hashing import sha256_json, sha256_text
from .model import (
    AttributeEvidence,
    EvidenceBundle,
    FactEvidence,
    ImageTextPair,
    ObjectEvidence,
    SceneTextEvidence,
    Verdict,
    evidence_from_json,
    validate_pair,
)
from .prompts import template_digests
from .stages import (
    DetectionMethod,
    SelfCheckDemo,
    ToolPlan,
    extract_claims,
    formulate_queries,
    is_degraded,
    self_check,
    verify,
)
from .tools import (
    DEFAULT_FACT_TOP_K,
    ToolBackendSet,
    detect_objects,
    fact_snippet_line,
    read_scene_text,
    search_facts,
)

logger = logging.getLogger(__name__)

_TOOL_POOL_WIDTH = 8


@dataclass(frozen=True)
class TraceRecord:
    """One executed stage: what went in, what came out, and whether it was cached."""

    stage: str
    input_digest: str
    output_digest: str
    duration_ms: int
    cache_hit: bool

    def to_json(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "input_digest": self.input_digest,
            "output_digest": self.output_digest,
            "duration_ms": self.duration_ms,
            "cache_hit": self.cache_hit,
        }


@dataclass(frozen=True)
class DetectionResult:
    pair_id: str
    method: DetectionMethod
    verdicts: tuple[Verdict, ...]
    plan: ToolPlan | None
    evidence: EvidenceBundle
    degraded: bool
    trace: tuple[TraceRecord, ...]

    def payload_json(self) -> dict[str, Any]:
        """The deterministic part, written to the per-pair result file.

        Timing and cache hits live in the run manifest instead, so this
        payload is byte-stable across schedules and cache states.
        """
        return {
            "pair_id": self.pair_id,
            "method": self.method.value,
            "plan": self.plan.to_json() if self.plan is not None else None,
            "evidence": self.evidence.to_json(),
            "verdicts": [v.to_json() for v in self.verdicts],
            "degraded": self.degraded,
        }


@dataclass(frozen=True)
class PairFailure:
    pair_id: str
    error_type: str
    message: str
    trace: tuple[TraceRecord, ...]

    def to_json(self) -> dict[str, Any]:
        return {
            "pair_id": self.pair_id,
            "error_type": self.error_type,
            "message": self.message,
        }


@dataclass
class BatchOutcome:
    results: list[DetectionResult]
    failures: list[PairFailure]

    @property
    def ok(self) -> bool:
        return not self.failures


class _Tracer:
    """Collects trace records for one pair; thread-safe, order-stable."""

    def __init__(self) -> None:
        self._records: list[TraceRecord] = []
        self._lock = threading.Lock()

    def record(self, stage: str, input_digest: str, output_digest: str,
               duration_ms: int, cache_hit: bool) -> None:
        with self._lock:
            self._records.append(TraceRecord(
                stage=stage, input_digest=input_digest, output_digest=output_digest,
                duration_ms=duration_ms, cache_hit=cache_hit,
            ))

    def snapshot(self) -> tuple[TraceRecord, ...]:
        with self._lock:
            records = list(self._records)
        # Stable report order regardless of completion interleaving.
        return tuple(sorted(records, key=lambda r: (r.stage, r.input_digest)))


class _InstrumentedGateway:
    """Gateway wrapper adding the executor's cache and trace around each call.

    Replies are cached only at temperature 0; sampled output must never be
    replayed as truth.
    """

    def __init__(self, gateway: ModelGateway, cache: DiskCache | None,
                 tracer: _Tracer) -> None:
        self._gateway = gateway
        self._cache = cache
        self._tracer = tracer
        self.backend = gateway.backend

    def complete(self, request: ModelRequest) -> ModelResponse:
        digest = request_digest(request)
        stage = f"model:{request.purpose_tag.value}"
        cacheable = self._cache is not None and request.decode_params.temperature == 0
        key = CacheKey(
            tool_kind="model",
            canonical_query=digest,
            image_digest="",
            backend_id=self._gateway.backend.backend_id,
        )
        started = time.monotonic()
        if cacheable:
            hit, value = self._cache.get(key)
            if hit:
                response = ModelResponse(
                    text=value["text"],
                    backend_id=self._gateway.backend.backend_id,
                    latency_ms=0,
                    attempt_count=1,
                )
                self._tracer.record(stage, digest, sha256_text(response.text),
                                    _elapsed_ms(started), cache_hit=True)
                return response
        response = self._gateway.complete(request)
        if cacheable:
            self._cache.put(key, {"text": response.text})
        self._tracer.record(stage, digest, sha256_text(response.text),
                            _elapsed_ms(started), cache_hit=False)
        return response


def _elapsed_ms(started: float) -> int:
    return max(0, int(round((time.monotonic() - started) * 1000)))


def _cached_tool_call(
    cache: DiskCache | None,
    tracer: _Tracer,
    stage: str,
    key: CacheKey,
    compute: Callable[[], Any],
    encode: Callable[[Any], Any],
    decode: Callable[[Any], Any],
) -> Any:
    started = time.monotonic()
    key_digest = key.digest()
    if cache is not None:
        hit, raw = cache.get(key)
        if hit:
            value = decode(raw)
            tracer.record(stage, key_digest, sha256_json(raw),
                          _elapsed_ms(started), cache_hit=True)
            return value
    value = compute()
    encoded = encode(value)
    if cache is not None:
        cache.put(key, encoded)
    tracer.record(stage, key_digest, sha256_json(encoded),
                  _elapsed_ms(started), cache_hit=False)
    return value


# --- tool fan-out ---------------------------------------------------------------


def _run_tools(
    pair: ImageTextPair,
    plan: ToolPlan,
    backends: ToolBackendSet,
    cache: DiskCache | None,
    tracer: _Tracer,
    fact_top_k: int,
) -> EvidenceBundle:
    """Execute every planned tool call concurrently and merge deterministically."""
    image = pair.image

    def object_task() -> list[ObjectEvidence]:
        labels = plan.object_label_union()
        key = CacheKey("object-detect", ",".join(sorted(labels)), image.digest,
                       backends.object_detector.backend_id)
        return _cached_tool_call(
            cache, tracer, "tool:object-detect", key,
            lambda: detect_objects(backends.object_detector, image, labels),
            lambda items: [e.to_json() for e in items],
            lambda raw: [evidence_from_json(item) for item in raw],
        )

    def scene_task() -> list[SceneTextEvidence]:
        key = CacheKey("scene-text", "full-image", image.digest,
                       backends.scene_text_reader.backend_id)
        return _cached_tool_call(
            cache, tracer, "tool:scene-text", key,
            lambda: read_scene_text(backends.scene_text_reader, image),
            lambda items: [e.to_json() for e in items],
            lambda raw: [evidence_from_json(item) for item in raw],
        )

    def attribute_task(question: str) -> AttributeEvidence:
        key = CacheKey("attribute", question.strip(), image.digest,
                       backends.attribute_answerer.backend_id)
        return _cached_tool_call(
            cache, tracer, "tool:attribute", key,
            lambda: backends.attribute_answerer.answer(image, question),
            lambda item: item.to_json(),
            lambda raw: evidence_from_json(raw),
        )

    def fact_task(question: str) -> FactEvidence:
        key = CacheKey("fact-search", f"{question.strip()} [top_k={fact_top_k}]", "",
                       backends.fact_searcher.backend_id)

        def compute() -> FactEvidence:
            snippets = search_facts(backends.fact_searcher, question, fact_top_k)
            return FactEvidence(
                question=question,
                snippets=tuple(fact_snippet_line(s) for s in snippets),
            )

        return _cached_tool_call(
            cache, tracer, "tool:fact-search", key,
            compute,
            lambda item: item.to_json(),
            lambda raw: evidence_from_json(raw),
        )

    attribute_questions = [
        question
        for queries in plan.per_claim
        for question in queries.attribute_questions
    ]
    fact_questions = [
        question
        for queries in plan.per_claim
        for question in queries.fact_questions
    ]

    with ThreadPoolExecutor(max_workers=_TOOL_POOL_WIDTH,
                            thread_name_prefix="tools") as pool:
        object_future: Future | None = None
        scene_future: Future | None = None
        if plan.object_label_union():
            object_future = pool.submit(object_task)
        if plan.wants_scene_text():
            scene_future = pool.submit(scene_task)
        attribute_futures = [pool.submit(attribute_task, q) for q in attribute_questions]
        fact_futures = [pool.submit(fact_task, q) for q in fact_questions]

        # Merge order is positional, never completion order.
        objects = tuple(object_future.result()) if object_future is not None else ()
        attributes = tuple(f.result() for f in attribute_futures)
        scene_texts = tuple(scene_future.result()) if scene_future is not None else ()
        facts = tuple(f.result() for f in fact_futures)

    return EvidenceBundle(
        objects=objects,
        attributes=attributes,
        scene_texts=scene_texts,
        facts=facts,
    )


# --- single-pair and batch drivers --------------------------------------------------


def run_detection(
    pair: ImageTextPair,
    method: DetectionMethod,
    backends: ToolBackendSet | None,
    gateway: ModelGateway,
    cache: DiskCache | None = None,
    fact_top_k: int = DEFAULT_FACT_TOP_K,
    demonstrations: Sequence[SelfCheckDemo] = (),
) -> DetectionResult:
    """Run one pair through the selected detection method.

    With pre-annotated claims (benchmark mode) extraction is skipped; an
    unannotated pair goes through the extraction stage first. The self-check
    methods never touch tool backends and carry empty evidence.
    """
    report = validate_pair(pair)
    if not report.ok:
        raise ValueError(f"pair {pair.id!r} invalid: " + "; ".join(report.violations))

    tracer = _Tracer()
    gateway_view = _InstrumentedGateway(gateway, cache, tracer)

    try:
        if not pair.claims:
            claims = extract_claims(pair.text, pair.task, gateway_view)
            pair = replace(pair, claims=tuple(claims))

        if method is DetectionMethod.UNIHD:
            if backends is None:
                raise ConfigInvalid("unihd requires tool backends")
            plan = formulate_queries(pair, gateway_view)
            evidence = _run_tools(pair, plan, backends, cache, tracer, fact_top_k)
            verdicts = verify(pair, evidence, gateway_view)
        else:
            plan = None
            evidence = EvidenceBundle()
            shots = 0 if method is DetectionMethod.SELF_CHECK_0SHOT else 2
            verdicts = self_check(pair, shots, gateway_view, demonstrations)
    except Exception as exc:
        # So batch failure records can show which stages did complete.
        exc.completed_trace = tracer.snapshot()  # type: ignore[attr-defined]
        raise

    if len(verdicts) != len(pair.claims):
        raise AssertionError("verdict count diverged from claim count")

    return DetectionResult(
        pair_id=pair.id,
        method=method,
        verdicts=tuple(verdicts),
        plan=plan,
        evidence=evidence,
        degraded=is_degraded(verdicts),
        trace=tracer.snapshot(),
    )


def run_batch(
    pairs: Sequence[ImageTextPair],
    method: DetectionMethod,
    backends: ToolBackendSet | None,
    gateway: ModelGateway,
    cache: DiskCache | None = None,
    width: int = 4,
    fact_top_k: int = DEFAULT_FACT_TOP_K,
    demonstrations: Sequence[SelfCheckDemo] = (),
) -> BatchOutcome:
    """Drive a batch with bounded parallelism and per-pair failure isolation.

    Results come back in input order regardless of completion order; a
    failing pair becomes a failure record and never halts its neighbors.
    """
    if width < 1:
        raise ConfigInvalid(f"width must be >= 1, got {width}")
    ids = [pair.id for pair in pairs]
    if len(set(ids)) != len(ids):
        raise ConfigInvalid("pair ids must be unique within a batch")

    slots: list[DetectionResult | PairFailure | None] = [None] * len(pairs)

    def run_one(position: int, pair: ImageTextPair) -> None:
        try:
            slots[position] = run_detection(
                pair, method, backends, gateway, cache,
                fact_top_k=fact_top_k, demonstrations=demonstrations,
            )
        except Exception as exc:  # noqa: BLE001 - isolation boundary
            logger.warning("pair %s failed: %s", pair.id, exc)
            slots[position] = PairFailure(
                pair_id=pair.id,
                error_type=type(exc).__name__,
                message=str(exc),
                trace=getattr(exc, "completed_trace", ()),
            )

    with ThreadPoolExecutor(max_workers=width, thread_name_prefix="pairs") as pool:
        futures = [pool.submit(run_one, i, pair) for i, pair in enumerate(pairs)]
        for future in futures:
            future.result()

    results = [slot for slot in slots if isinstance(slot, DetectionResult)]
    failures = [slot for slot in slots if isinstance(slot, PairFailure)]
    if cache is not None:
        cache.flush_stats()
    return BatchOutcome(results=results, failures=failures)


# --- run directory ---------------------------------------------------------------


def write_run_dir(
    out_dir: str | Path,
    run_id: str,
    outcome: BatchOutcome,
    method: DetectionMethod,
    backend_ids: dict[str, str],
    config_echo: dict[str, Any] | None = None,
    created_at: str | None = None,
) -> Path:
    """Write ``results/<run-id>/{manifest.json, <pair-id>.json, errors.json}``.

    Per-pair files hold only the deterministic payload; timings, cache hits,
    and the wall clock go into the manifest. The run directory must not
    already exist; concurrent invocations need distinct run ids.
    """
    run_dir = Path(out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=False)

    for result in outcome.results:
        path = run_dir / f"{result.pair_id}.json"
        path.write_text(
            json.dumps(result.payload_json(), ensure_ascii=False, indent=2,
                       sort_keys=True) + "\n",
            "utf-8",
        )

    (run_dir / "errors.json").write_text(
        json.dumps([f.to_json() for f in outcome.failures], ensure_ascii=False,
                   indent=2, sort_keys=True) + "\n",
        "utf-8",
    )

    manifest = {
        "run_id": run_id,
        "created_at": created_at if created_at is not None else _utc_now(),
        "method": method.value,
        "backend_ids": backend_ids,
        "template_digests": template_digests(),
        "degraded_pairs": sorted(r.pair_id for r in outcome.results if r.degraded),
        "failed_pairs": sorted(f.pair_id for f in outcome.failures),
        "config": config_echo or {},
        "traces": {
            r.pair_id: [record.to_json() for record in r.trace]
            for r in outcome.results
        },
    }
    (run_dir / "manifest.json").write_text(
        json.dumps(manifest, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        "utf-8",
    )
    return run_dir


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def load_result_payload(path: str | Path) -> DetectionResult:
    """Read one per-pair result file back into a DetectionResult (no trace)."""
    data = json.loads(Path(path).read_text("utf-8"))
    plan = data.get("plan")
    return DetectionResult(
        pair_id=str(data["pair_id"]),
        method=DetectionMethod(data["method"]),
        verdicts=tuple(Verdict.from_json(v) for v in data["verdicts"]),
        plan=ToolPlan.from_json(plan) if plan is not None else None,
        evidence=EvidenceBundle.from_json(data["evidence"]),
        degraded=bool(data["degraded"]),
        trace=(),
    )


def load_run_results(run_dir: str | Path) -> list[DetectionResult]:
    """Load every per-pair result file from a run directory."""
    run_dir = Path(run_dir)
    results = []
    for path in sorted(run_dir.glob("*.json")):
        if path.name in ("manifest.json", "errors.json"):
            continue
        results.append(load_result_payload(path))
    return results
