"""Model-mediated pipeline stages.

Three stages talk to the underlying model: claim extraction, query
formulation (whose replies are parsed into a :class:`ToolPlan`), and
verification (whose replies are parsed into verdicts). The self-check
baselines reuse the verdict machinery without any tool evidence.

Every parser here is lenient about transport damage (fences, quotes,
trailing commas; see :mod:`halodet.json_repair`) but strict about meaning:
claim coverage, the binary label vocabulary, and per-claim rationales are
enforced, and a reply that still fails after one retry degrades to
explicitly flagged unverified verdicts rather than silently truncating.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Sequence

from .errors import (
    ClaimCountMismatch,
    EmptyExtraction,
    HalodetError,
    MissingDemonstrations,
    ParseError,
    UnknownLabel,
    UnparseableModelOutput,
)
from .gateway import DecodeParams, ModelGateway, ModelRequest, PurposeTag
from .json_repair import loads_lenient
from .model import (
    Claim,
    EvidenceBundle,
    HallucinationCategory,
    ImageRef,
    ImageTextPair,
    Label,
    ParseFlag,
    TaskType,
    Verdict,
    claim_key,
    parse_claim_key,
)
from .prompts import (
    RenderedPrompt,
    SupplementalId,
    TemplateId,
    render,
    render_claim_list,
    render_object_string,
)
from .tools import format_evidence_sections

_WIRE_LABELS = {
    "hallucination": Label.HALLUCINATORY,
    "non-hallucination": Label.NON_HALLUCINATORY,
}


class DetectionMethod(Enum):
    UNIHD = "unihd"
    SELF_CHECK_0SHOT = "selfcheck0"
    SELF_CHECK_2SHOT = "selfcheck2"


@dataclass(frozen=True)
class ClaimQueries:
    """Tool routing for one claim; an empty list means "tool not needed"."""

    object_labels: tuple[str, ...] = ()
    attribute_questions: tuple[str, ...] = ()
    scene_text_questions: tuple[str, ...] = ()
    fact_questions: tuple[str, ...] = ()


@dataclass(frozen=True)
class ToolPlan:
    """Per-claim routing, positionally indexed: entry k serves claim k+1."""

    per_claim: tuple[ClaimQueries, ...]

    @property
    def n_claims(self) -> int:
        return len(self.per_claim)

    def for_claim(self, index: int) -> ClaimQueries:
        return self.per_claim[index - 1]

    def object_label_union(self) -> list[str]:
        """Pair-level detection vocabulary: first-seen order, deduplicated."""
        seen: dict[str, None] = {}
        for queries in self.per_claim:
            for label in queries.object_labels:
                seen.setdefault(label)
        return list(seen)

    def wants_scene_text(self) -> bool:
        return any(q.scene_text_questions for q in self.per_claim)

    def to_json(self) -> dict[str, Any]:
        return {
            claim_key(i): {
                "object_labels": list(q.object_labels),
                "attribute_questions": list(q.attribute_questions),
                "scene_text_questions": list(q.scene_text_questions),
                "fact_questions": list(q.fact_questions),
            }
            for i, q in enumerate(self.per_claim, start=1)
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "ToolPlan":
        indexed = sorted((parse_claim_key(k), v) for k, v in data.items())
        if [i for i, _ in indexed] != list(range(1, len(indexed) + 1)):
            raise ValueError("plan does not cover claims 1..n exactly once")
        return cls(per_claim=tuple(
            ClaimQueries(
                object_labels=tuple(v["object_labels"]),
                attribute_questions=tuple(v["attribute_questions"]),
                scene_text_questions=tuple(v["scene_text_questions"]),
                fact_questions=tuple(v["fact_questions"]),
            )
            for _, v in indexed
        ))


# --- parsing helpers -----------------------------------------------------------


def _is_none_marker(value: str) -> bool:
    return value.strip().lower() == "none"


def _claim_mapping(raw: str, n_claims: int) -> dict[int, Any]:
    """Decode a {"claimK": ...} reply and check it covers claims 1..n."""
    try:
        value, _ = loads_lenient(raw)
    except ValueError as exc:
        raise UnparseableModelOutput(str(exc)) from exc
    if not isinstance(value, dict):
        raise UnparseableModelOutput(f"expected a mapping, got {type(value).__name__}")
    mapping: dict[int, Any] = {}
    for key, entry in value.items():
        try:
            index = parse_claim_key(str(key))
        except ValueError as exc:
            raise UnparseableModelOutput(f"unexpected key {key!r}") from exc
        mapping[index] = entry
    if set(mapping) != set(range(1, n_claims + 1)):
        raise ClaimCountMismatch(n_claims, len(mapping))
    return mapping


def parse_claim_query_map(
    raw: str, n_claims: int, kind: HallucinationCategory
) -> dict[int, list[str]]:
    """Parse one query-formulation reply into per-claim query lists.

    Object replies are period-separated label strings; the other kinds are
    lists of question strings. "none" (bare or as a one-element list, any
    case) collapses to the empty list. The reply must cover claim1..claimN
    exactly.
    """
    if n_claims < 1:
        raise ValueError("n_claims must be >= 1")
    mapping = _claim_mapping(raw, n_claims)
    result: dict[int, list[str]] = {}
    for index in range(1, n_claims + 1):
        entry = mapping[index]
        if isinstance(entry, str):
            items = [] if _is_none_marker(entry) else [entry]
        elif isinstance(entry, list):
            if any(not isinstance(item, str) for item in entry):
                raise UnparseableModelOutput(f"{claim_key(index)}: non-string entry")
            items = [item for item in entry if not _is_none_marker(item)]
        else:
            raise UnparseableModelOutput(
                f"{claim_key(index)}: expected string or list, got {type(entry).__name__}"
            )
        if kind is HallucinationCategory.OBJECT:
            labels: list[str] = []
            for item in items:
                labels.extend(part.strip() for part in item.split(".") if part.strip())
            result[index] = labels
        else:
            result[index] = [item.strip() for item in items if item.strip()]
    return result


def _dedup_lower(labels: Sequence[str]) -> tuple[str, ...]:
    # Detectors treat labels as a vocabulary set; case duplicates are noise.
    seen: dict[str, None] = {}
    for label in labels:
        seen.setdefault(label.lower())
    return tuple(seen)


# --- claim extraction ------------------------------------------------------------


def extract_claims(pair_text: str, task: TaskType, gateway: ModelGateway) -> list[Claim]:
    """Derive ordered claims from a response (or, for text-to-image, a query).

    Benchmark runs skip this stage entirely: pre-annotated claims pass
    through untouched. This is the open-domain path.
    """
    if not pair_text.strip():
        raise EmptyExtraction("cannot extract claims from empty text")
    prompt = render(SupplementalId.EXTRACT_CLAIMS, {"text": pair_text})
    response = gateway.complete(ModelRequest(
        prompt=prompt, decode_params=DecodeParams(), purpose_tag=PurposeTag.EXTRACT,
    ))
    try:
        value, _ = loads_lenient(response.text)
    except ValueError as exc:
        raise UnparseableModelOutput(str(exc)) from exc
    if not isinstance(value, dict):
        raise UnparseableModelOutput("claim extraction reply is not a mapping")
    if not value:
        raise EmptyExtraction("model returned zero claims")
    try:
        indexed = sorted((parse_claim_key(str(k)), str(v)) for k, v in value.items())
    except ValueError as exc:
        raise UnparseableModelOutput(f"bad claim key in extraction reply: {exc}") from exc
    if [i for i, _ in indexed] != list(range(1, len(indexed) + 1)):
        raise UnparseableModelOutput("extraction reply skips claim indices")
    claims = [Claim(index=i, text=text) for i, text in indexed if text.strip()]
    if not claims:
        raise EmptyExtraction("model returned zero non-empty claims")
    return claims


# --- query formulation -------------------------------------------------------------


def _tagged(template: TemplateId, exc: HalodetError) -> HalodetError:
    exc.template_id = template  # type: ignore[attr-defined]
    return exc


def _formulate_one(
    template: TemplateId,
    bindings: dict[str, str],
    kind: HallucinationCategory,
    n_claims: int,
    gateway: ModelGateway,
) -> dict[int, list[str]]:
    prompt = render(template, bindings)
    try:
        response = gateway.complete(ModelRequest(
            prompt=prompt, decode_params=DecodeParams(),
            purpose_tag=PurposeTag.QUERY_FORMULATE,
        ))
        return parse_claim_query_map(response.text, n_claims, kind)
    except HalodetError as exc:
        raise _tagged(template, exc)


def formulate_queries(pair: ImageTextPair, gateway: ModelGateway) -> ToolPlan:
    """Route every claim to the tools it needs.

    Issues the four query templates; the object, scene-text, and fact calls
    run concurrently, while the attribute call waits for the object result
    because its prompt binds the pair-level object vocabulary. Errors carry
    a ``template_id`` attribute naming the originating template.
    """
    if not pair.claims:
        raise ValueError(f"pair {pair.id!r} has no claims")
    n = len(pair.claims)
    claims_text = render_claim_list([c.text for c in pair.claims])
    bindings = {"claims": claims_text}

    with ThreadPoolExecutor(max_workers=3, thread_name_prefix="formulate") as pool:
        object_future = pool.submit(
            _formulate_one, TemplateId.OBJECT_QUERY, bindings,
            HallucinationCategory.OBJECT, n, gateway)
        scene_future = pool.submit(
            _formulate_one, TemplateId.SCENE_TEXT_QUERY, bindings,
            HallucinationCategory.SCENE_TEXT, n, gateway)
        fact_future = pool.submit(
            _formulate_one, TemplateId.FACT_QUERY, bindings,
            HallucinationCategory.FACT, n, gateway)
        # Collect in fixed order so the first error surfaced is deterministic.
        objects = object_future.result()
        scene_texts = scene_future.result()
        facts = fact_future.result()

    object_labels = {i: _dedup_lower(objects[i]) for i in objects}
    union: dict[str, None] = {}
    for index in range(1, n + 1):
        for label in object_labels[index]:
            union.setdefault(label)
    attribute_bindings = {
        "objects": render_object_string(union),
        "claims": claims_text,
    }
    attributes = _formulate_one(
        TemplateId.ATTRIBUTE_QUERY, attribute_bindings,
        HallucinationCategory.ATTRIBUTE, n, gateway)

    return ToolPlan(per_claim=tuple(
        ClaimQueries(
            object_labels=object_labels[i],
            attribute_questions=tuple(attributes[i]),
            scene_text_questions=tuple(scene_texts[i]),
            fact_questions=tuple(facts[i]),
        )
        for i in range(1, n + 1)
    ))


# --- verdict parsing -----------------------------------------------------------


def _parse_verdict_entry(entry: Any, n_claims: int, repaired: bool) -> Verdict:
    if not isinstance(entry, dict):
        raise UnparseableModelOutput(f"verdict entry is not a mapping: {entry!r}")
    claim_keys = [k for k in entry if str(k).startswith("claim")]
    if len(claim_keys) != 1:
        raise UnparseableModelOutput(f"verdict entry needs exactly one claim key: {entry!r}")
    key = str(claim_keys[0])
    index = parse_claim_key(key)
    if not 1 <= index <= n_claims:
        raise ClaimCountMismatch(n_claims, index)
    raw_label = entry[claim_keys[0]]
    if not isinstance(raw_label, str):
        raise UnknownLabel(str(raw_label))
    label = _WIRE_LABELS.get(raw_label.strip().lower())
    if label is None:
        raise UnknownLabel(raw_label)
    extra = set(entry) - {claim_keys[0], "reason"}
    if extra:
        raise UnparseableModelOutput(f"{key}: unexpected fields {sorted(extra)}")
    reason = entry.get("reason")
    if not isinstance(reason, str) or not reason.strip():
        raise UnparseableModelOutput(f"{key}: missing reason")
    flags = frozenset({ParseFlag.REPAIRED}) if repaired else frozenset()
    return Verdict(claim_index=index, label=label, rationale=reason, parse_flags=flags)


def parse_verdicts(raw: str, n_claims: int) -> list[Verdict]:
    """Parse a verification reply into one verdict per claim, in index order.

    Transport repairs (code fences, trailing commas, quote style) are applied
    silently but flagged ``repaired`` on every verdict they touched. Anything
    outside the binary label vocabulary, a missing rationale, or imperfect
    claim coverage is an error, never a truncation.
    """
    if n_claims < 1:
        raise ValueError("n_claims must be >= 1")
    try:
        value, repaired = loads_lenient(raw)
    except ValueError as exc:
        raise UnparseableModelOutput(str(exc)) from exc
    if isinstance(value, dict):
        value = [value]
    if not isinstance(value, list):
        raise UnparseableModelOutput(f"expected a list, got {type(value).__name__}")
    verdicts = [_parse_verdict_entry(entry, n_claims, repaired) for entry in value]
    by_index = {v.claim_index: v for v in verdicts}
    if len(by_index) != len(verdicts) or set(by_index) != set(range(1, n_claims + 1)):
        raise ClaimCountMismatch(n_claims, len(verdicts))
    return [by_index[i] for i in range(1, n_claims + 1)]


def _salvage_verdicts(raw: str, n_claims: int) -> list[Verdict]:
    """Best-effort recovery after a failed parse: keep whatever entries are
    individually sound and fill the rest with flagged unverified fallbacks."""
    recovered: dict[int, Verdict] = {}
    try:
        value, _ = loads_lenient(raw)
    except ValueError:
        value = None
    if isinstance(value, dict):
        value = [value]
    if isinstance(value, list):
        for entry in value:
            try:
                verdict = _parse_verdict_entry(entry, n_claims, repaired=True)
            except ParseError:
                continue
            recovered.setdefault(verdict.claim_index, verdict)
    fallback_flags = frozenset({ParseFlag.UNVERIFIED})
    return [
        recovered.get(i) or Verdict(
            claim_index=i, label=Label.NON_HALLUCINATORY, rationale="",
            parse_flags=fallback_flags,
        )
        for i in range(1, n_claims + 1)
    ]


def _judge(request: ModelRequest, n_claims: int, gateway: ModelGateway) -> list[Verdict]:
    """One verdict-producing model call with one retry, then flagged fallback."""
    response = gateway.complete(request)
    try:
        return parse_verdicts(response.text, n_claims)
    except ParseError:
        retried = gateway.complete(request)
        try:
            return parse_verdicts(retried.text, n_claims)
        except ParseError:
            return _salvage_verdicts(retried.text, n_claims)


def is_degraded(verdicts: Sequence[Verdict]) -> bool:
    return any(ParseFlag.UNVERIFIED in v.parse_flags for v in verdicts)


# --- verification -----------------------------------------------------------------


def build_verification_prompt(
    pair: ImageTextPair, evidence: EvidenceBundle
) -> RenderedPrompt:
    """Bind pooled evidence and the claim list into the direction's template."""
    template = (
        TemplateId.VERIFY_TEXT_TO_IMAGE
        if pair.task is TaskType.TEXT_TO_IMAGE
        else TemplateId.VERIFY_IMAGE_TO_TEXT
    )
    bindings = dict(format_evidence_sections(evidence))
    bindings["claims"] = render_claim_list([c.text for c in pair.claims])
    return render(template, bindings, [pair.image])


def verify(
    pair: ImageTextPair, evidence: EvidenceBundle, gateway: ModelGateway
) -> list[Verdict]:
    """Judge the whole claim list in a single model call over pooled evidence."""
    if not pair.claims:
        raise ValueError(f"pair {pair.id!r} has no claims")
    prompt = build_verification_prompt(pair, evidence)
    request = ModelRequest(prompt=prompt, decode_params=DecodeParams(),
                           purpose_tag=PurposeTag.VERIFY)
    return _judge(request, len(pair.claims), gateway)


# --- self-check baselines ------------------------------------------------------------


@dataclass(frozen=True)
class SelfCheckDemo:
    """One worked demonstration: an image, its claims, and their judgments."""

    image: ImageRef
    claims: tuple[str, ...]
    verdicts: tuple[Verdict, ...]

    def __post_init__(self) -> None:
        if len(self.claims) != len(self.verdicts):
            raise ValueError("demo needs one verdict per claim")


def _render_demo(demo: SelfCheckDemo) -> str:
    wire = [
        {claim_key(v.claim_index): (
            "hallucination" if v.label is Label.HALLUCINATORY else "non-hallucination"
        ), "reason": v.rationale}
        for v in demo.verdicts
    ]
    return (
        "(Image Entered)\n"
        "Here is the claim list:\n"
        + render_claim_list(list(demo.claims))
        + "\n\nOutput: "
        + json.dumps(wire, ensure_ascii=False)
    )


def self_check(
    pair: ImageTextPair,
    shots: int,
    gateway: ModelGateway,
    demonstrations: Sequence[SelfCheckDemo] = (),
) -> list[Verdict]:
    """Baseline detection with no tool evidence, 0-shot or 2-shot."""
    if shots not in (0, 2):
        raise ValueError(f"shots must be 0 or 2, got {shots}")
    if not pair.claims:
        raise ValueError(f"pair {pair.id!r} has no claims")
    claims_text = render_claim_list([c.text for c in pair.claims])
    if shots == 0:
        prompt = render(SupplementalId.SELF_CHECK_0SHOT, {"claims": claims_text},
                        [pair.image])
    else:
        if len(demonstrations) != 2:
            raise MissingDemonstrations(
                f"2-shot self-check needs 2 demonstrations, got {len(demonstrations)}"
            )
        demo_text = "\n\n".join(_render_demo(d) for d in demonstrations)
        images = [d.image for d in demonstrations] + [pair.image]
        prompt = render(
            SupplementalId.SELF_CHECK_2SHOT,
            {"demonstrations": demo_text, "claims": claims_text},
            images,
        )
    request = ModelRequest(prompt=prompt, decode_params=DecodeParams(),
                           purpose_tag=PurposeTag.SELF_CHECK)
    return _judge(request, len(pair.claims), gateway)
