"""Domain types shared by every pipeline stage.

Pairs, claims, segments, labels, evidence, and verdicts are immutable value
objects with canonical JSON encodings. Enum vocabularies are closed: decoding
rejects anything outside them instead of coercing.

Pair-level structural invariants are checked by :func:`validate_pair`, which
reports violations as data rather than raising, so that malformed inputs can
be surfaced in full.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Union

from .hashing import sha256_file


class TaskType(Enum):
    IMAGE_CAPTIONING = "image-captioning"
    VQA = "vqa"
    TEXT_TO_IMAGE = "text-to-image"

    @property
    def direction(self) -> str:
        """"image-to-text" for captioning/VQA, "text-to-image" otherwise."""
        if self is TaskType.TEXT_TO_IMAGE:
            return "text-to-image"
        return "image-to-text"


class HallucinationCategory(Enum):
    OBJECT = "object"
    ATTRIBUTE = "attribute"
    SCENE_TEXT = "scene-text"
    FACT = "fact"


class Label(Enum):
    HALLUCINATORY = "hallucinatory"
    NON_HALLUCINATORY = "non-hallucinatory"


class ParseFlag(Enum):
    REPAIRED = "repaired"
    UNVERIFIED = "unverified"


def claim_key(index: int) -> str:
    """Canonical per-claim key: "claim" + decimal index, no padding."""
    if index < 1:
        raise ValueError(f"claim index must be >= 1, got {index}")
    return f"claim{index}"


def parse_claim_key(key: str) -> int:
    """Inverse of :func:`claim_key`; raises ValueError on anything else."""
    if not key.startswith("claim"):
        raise ValueError(f"not a claim key: {key!r}")
    suffix = key[len("claim"):]
    if not suffix.isdigit() or (len(suffix) > 1 and suffix[0] == "0"):
        raise ValueError(f"not a claim key: {key!r}")
    index = int(suffix)
    if index < 1:
        raise ValueError(f"not a claim key: {key!r}")
    return index


@dataclass(frozen=True)
class ImageRef:
    """Reference to an image: presentation path/URL plus content identity.

    The digest (SHA-256 of the image bytes) is the identity used for caching
    and mock lookup; the path is never trusted for identity.
    """

    path: str
    digest: str

    @classmethod
    def from_file(cls, path: str) -> "ImageRef":
        return cls(path=path, digest=sha256_file(path))

    def to_json(self) -> dict[str, Any]:
        return {"path": self.path, "digest": self.digest}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "ImageRef":
        return cls(path=str(data["path"]), digest=str(data["digest"]))


@dataclass(frozen=True)
class NormBox:
    """Bounding box as fractions of image width/height, corners ordered."""

    x1: float
    y1: float
    x2: float
    y2: float

    def to_json(self) -> dict[str, float]:
        return {"x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "NormBox":
        return cls(
            x1=float(data["x1"]), y1=float(data["y1"]),
            x2=float(data["x2"]), y2=float(data["y2"]),
        )


def validate_norm_box(box: NormBox) -> bool:
    """True iff 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1."""
    return 0.0 <= box.x1 < box.x2 <= 1.0 and 0.0 <= box.y1 < box.y2 <= 1.0


@dataclass(frozen=True)
class Claim:
    """One independently verifiable statement, addressed by 1-based index."""

    index: int
    text: str
    gold_label: Label | None = None
    gold_categories: frozenset[HallucinationCategory] | None = None
    segment_id: str | None = None

    def to_json(self) -> dict[str, Any]:
        data: dict[str, Any] = {"index": self.index, "text": self.text}
        if self.gold_label is not None:
            data["gold_label"] = self.gold_label.value
        if self.gold_categories:
            data["gold_categories"] = sorted(c.value for c in self.gold_categories)
        if self.segment_id is not None:
            data["segment_id"] = self.segment_id
        return data

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "Claim":
        gold_label = data.get("gold_label")
        gold_categories = data.get("gold_categories")
        return cls(
            index=int(data["index"]),
            text=str(data["text"]),
            gold_label=Label(gold_label) if gold_label is not None else None,
            gold_categories=(
                frozenset(HallucinationCategory(c) for c in gold_categories)
                if gold_categories is not None
                else None
            ),
            segment_id=data.get("segment_id"),
        )


@dataclass(frozen=True)
class Segment:
    """Contiguous response span grouping one or more claims."""

    id: str
    text: str
    claim_indices: tuple[int, ...]

    def to_json(self) -> dict[str, Any]:
        return {"id": self.id, "text": self.text, "claim_indices": list(self.claim_indices)}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "Segment":
        return cls(
            id=str(data["id"]),
            text=str(data["text"]),
            claim_indices=tuple(int(i) for i in data["claim_indices"]),
        )


@dataclass(frozen=True)
class ImageTextPair:
    """The unit under test: an image reference plus its paired text.

    For image-to-text tasks the text is the model's generated response; for
    text-to-image it is the user query that produced the image.
    """

    id: str
    task: TaskType
    image: ImageRef
    text: str
    claims: tuple[Claim, ...] = ()
    segments: tuple[Segment, ...] | None = None

    def to_json(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "id": self.id,
            "task": self.task.value,
            "image": self.image.to_json(),
            "text": self.text,
            "claims": [c.to_json() for c in self.claims],
        }
        if self.segments is not None:
            data["segments"] = [s.to_json() for s in self.segments]
        return data

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "ImageTextPair":
        segments = data.get("segments")
        return cls(
            id=str(data["id"]),
            task=TaskType(data["task"]),
            image=ImageRef.from_json(data["image"]),
            text=str(data["text"]),
            claims=tuple(Claim.from_json(c) for c in data.get("claims", [])),
            segments=(
                tuple(Segment.from_json(s) for s in segments)
                if segments is not None
                else None
            ),
        )


# --- evidence -------------------------------------------------------------


@dataclass(frozen=True)
class ObjectEvidence:
    label: str
    box: NormBox

    def to_json(self) -> dict[str, Any]:
        return {"kind": "object", "label": self.label, "box": self.box.to_json()}


@dataclass(frozen=True)
class AttributeEvidence:
    question: str
    answer: str

    def to_json(self) -> dict[str, Any]:
        return {"kind": "attribute", "question": self.question, "answer": self.answer}


@dataclass(frozen=True)
class SceneTextEvidence:
    text: str
    box: NormBox

    def to_json(self) -> dict[str, Any]:
        return {"kind": "scene-text", "text": self.text, "box": self.box.to_json()}


@dataclass(frozen=True)
class FactEvidence:
    """Search outcome for one fact question; snippets may be empty on a miss."""

    question: str
    snippets: tuple[str, ...]

    def to_json(self) -> dict[str, Any]:
        return {"kind": "fact", "question": self.question, "snippets": list(self.snippets)}


Evidence = Union[ObjectEvidence, AttributeEvidence, SceneTextEvidence, FactEvidence]


def evidence_from_json(data: dict[str, Any]) -> Evidence:
    kind = data.get("kind")
    if kind == "object":
        return ObjectEvidence(label=str(data["label"]), box=NormBox.from_json(data["box"]))
    if kind == "attribute":
        return AttributeEvidence(question=str(data["question"]), answer=str(data["answer"]))
    if kind == "scene-text":
        return SceneTextEvidence(text=str(data["text"]), box=NormBox.from_json(data["box"]))
    if kind == "fact":
        return FactEvidence(
            question=str(data["question"]),
            snippets=tuple(str(s) for s in data["snippets"]),
        )
    raise ValueError(f"unknown evidence kind: {kind!r}")


@dataclass(frozen=True)
class EvidenceBundle:
    """All evidence collected for one pair, grouped by tool family."""

    objects: tuple[ObjectEvidence, ...] = ()
    attributes: tuple[AttributeEvidence, ...] = ()
    scene_texts: tuple[SceneTextEvidence, ...] = ()
    facts: tuple[FactEvidence, ...] = ()

    def is_empty(self) -> bool:
        return not (self.objects or self.attributes or self.scene_texts or self.facts)

    def to_json(self) -> dict[str, Any]:
        return {
            "objects": [e.to_json() for e in self.objects],
            "attributes": [e.to_json() for e in self.attributes],
            "scene_texts": [e.to_json() for e in self.scene_texts],
            "facts": [e.to_json() for e in self.facts],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "EvidenceBundle":
        def typed(items: list[dict[str, Any]], expected: type) -> tuple:
            decoded = tuple(evidence_from_json(item) for item in items)
            for item in decoded:
                if not isinstance(item, expected):
                    raise ValueError(f"evidence kind mismatch: {item!r}")
            return decoded

        return cls(
            objects=typed(data.get("objects", []), ObjectEvidence),
            attributes=typed(data.get("attributes", []), AttributeEvidence),
            scene_texts=typed(data.get("scene_texts", []), SceneTextEvidence),
            facts=typed(data.get("facts", []), FactEvidence),
        )


# --- verdicts ----------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    """Binary per-claim judgment with its explanation.

    A rationale is required unless the claim went unverified (degraded run);
    the ``repaired`` flag records that the raw model output needed lenient
    re-parsing before it matched the documented format.
    """

    claim_index: int
    label: Label
    rationale: str
    parse_flags: frozenset[ParseFlag] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.claim_index < 1:
            raise ValueError(f"claim_index must be >= 1, got {self.claim_index}")
        if not self.rationale and ParseFlag.UNVERIFIED not in self.parse_flags:
            raise ValueError("rationale required unless flagged unverified")

    def to_json(self) -> dict[str, Any]:
        return {
            "claim_index": self.claim_index,
            "label": self.label.value,
            "rationale": self.rationale,
            "parse_flags": sorted(f.value for f in self.parse_flags),
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "Verdict":
        return cls(
            claim_index=int(data["claim_index"]),
            label=Label(data["label"]),
            rationale=str(data["rationale"]),
            parse_flags=frozenset(ParseFlag(f) for f in data.get("parse_flags", [])),
        )


# --- validation ----------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_pair(pair: ImageTextPair) -> ValidationReport:
    """Check every ImageTextPair invariant, reporting violations as data."""
    violations: list[str] = []

    if not pair.id:
        violations.append("empty pair id")
    if not pair.text:
        violations.append("empty pair text")

    n = len(pair.claims)
    indices = [c.index for c in pair.claims]
    if indices != list(range(1, n + 1)):
        violations.append(f"non-contiguous claim indices: {indices}")
    for claim in pair.claims:
        if not claim.text:
            violations.append(f"claim {claim.index}: empty text")
        if claim.gold_categories and claim.gold_label is not Label.HALLUCINATORY:
            violations.append(
                f"claim {claim.index}: category tags on a non-hallucinatory claim"
            )

    if pair.segments is not None:
        seen_ids: set[str] = set()
        owner_of: dict[int, str] = {}
        for segment in pair.segments:
            if segment.id in seen_ids:
                violations.append(f"duplicate segment id {segment.id!r}")
            seen_ids.add(segment.id)
            if not segment.claim_indices:
                violations.append(f"segment {segment.id!r}: empty claim list")
            for index in segment.claim_indices:
                if not 1 <= index <= n:
                    violations.append(
                        f"segment {segment.id!r}: dangling claim reference {index}"
                    )
                elif index in owner_of:
                    violations.append(
                        f"claim {index} assigned to both segment "
                        f"{owner_of[index]!r} and {segment.id!r}"
                    )
                else:
                    owner_of[index] = segment.id
        unassigned = [i for i in range(1, n + 1) if i not in owner_of]
        if unassigned:
            violations.append(f"claims not covered by any segment: {unassigned}")
        for claim in pair.claims:
            if claim.segment_id is None:
                continue
            if claim.segment_id not in seen_ids:
                violations.append(
                    f"claim {claim.index}: unknown segment id {claim.segment_id!r}"
                )
            elif owner_of.get(claim.index) != claim.segment_id:
                violations.append(
                    f"claim {claim.index}: segment_id {claim.segment_id!r} "
                    f"disagrees with owning segment {owner_of.get(claim.index)!r}"
                )

    return ValidationReport(violations=tuple(violations))
