"""Storage and rendering of the pipeline's prompt templates.

Templates live as UTF-8 text fixtures under ``templates/``; a manifest pins
each file's SHA-256 and the whole set is verified once, on first use. Each
file holds a ``SYSTEM:`` block and a ``USER:`` block; the user block declares
``{slot}`` placeholders. Rendering is a pure, single-pass substitution of
exactly the declared slots; surrounding template bytes are never touched, so
the braces that appear inside the templates' own response-format examples
survive verbatim.

Canonical templates are the four query-formulation prompts and the two
verification prompts. Supplemental templates (claim extraction, the two
self-check baselines, attribute answering) are authored here and marked
``origin: supplemental`` in the manifest; fidelity tests bind only to the
canonical set.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .errors import EmptyClaims, MissingSlot, TemplateIntegrityError, UnknownSlot
from .hashing import sha256_bytes
from .model import ImageRef


class TemplateId(Enum):
    """The six canonical templates."""

    OBJECT_QUERY = "query_object"
    ATTRIBUTE_QUERY = "query_attribute"
    SCENE_TEXT_QUERY = "query_scene_text"
    FACT_QUERY = "query_fact"
    VERIFY_IMAGE_TO_TEXT = "verify_image_to_text"
    VERIFY_TEXT_TO_IMAGE = "verify_text_to_image"


class SupplementalId(Enum):
    """Project-authored prompts; versioned like templates, tested separately."""

    EXTRACT_CLAIMS = "extract_claims"
    SELF_CHECK_0SHOT = "self_check_0shot"
    SELF_CHECK_2SHOT = "self_check_2shot"
    ATTRIBUTE_ANSWER = "attribute_answer"


PromptId = TemplateId | SupplementalId

_VERIFY_SLOTS = (
    "object_evidence",
    "attribute_evidence",
    "scene_text_evidence",
    "fact_evidence",
    "claims",
)

_SLOTS: dict[PromptId, tuple[str, ...]] = {
    TemplateId.OBJECT_QUERY: ("claims",),
    TemplateId.ATTRIBUTE_QUERY: ("objects", "claims"),
    TemplateId.SCENE_TEXT_QUERY: ("claims",),
    TemplateId.FACT_QUERY: ("claims",),
    TemplateId.VERIFY_IMAGE_TO_TEXT: _VERIFY_SLOTS,
    TemplateId.VERIFY_TEXT_TO_IMAGE: _VERIFY_SLOTS,
    SupplementalId.EXTRACT_CLAIMS: ("text",),
    SupplementalId.SELF_CHECK_0SHOT: ("claims",),
    SupplementalId.SELF_CHECK_2SHOT: ("demonstrations", "claims"),
    SupplementalId.ATTRIBUTE_ANSWER: ("question",),
}

# Templates allowed to carry image attachments: verification, self-check,
# and the attribute-answer prompt. Query formulation is text-only.
_ATTACHMENT_OK: frozenset[PromptId] = frozenset({
    TemplateId.VERIFY_IMAGE_TO_TEXT,
    TemplateId.VERIFY_TEXT_TO_IMAGE,
    TemplateId.ATTRIBUTE_QUERY,
    SupplementalId.SELF_CHECK_0SHOT,
    SupplementalId.SELF_CHECK_2SHOT,
    SupplementalId.ATTRIBUTE_ANSWER,
})


@dataclass(frozen=True)
class RenderedPrompt:
    """A fully bound prompt ready for a model call."""

    system: str
    user: str
    attachments: tuple[ImageRef, ...] = ()

    def __post_init__(self) -> None:
        if not self.system or not self.user:
            raise ValueError("system and user text must be non-empty")


@dataclass(frozen=True)
class _StoredTemplate:
    prompt_id: PromptId
    system: str
    user: str
    sha256: str


class _Registry:
    """Loads all template files once and verifies them against the manifest."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._templates: dict[PromptId, _StoredTemplate] | None = None
        self._digests: dict[str, str] = {}

    def _load(self) -> dict[PromptId, _StoredTemplate]:
        with self._lock:
            if self._templates is not None:
                return self._templates
            root = resources.files("halodet") / "templates"
            manifest = json.loads((root / "manifest.json").read_text("utf-8"))
            templates: dict[PromptId, _StoredTemplate] = {}
            for prompt_id in list(TemplateId) + list(SupplementalId):
                filename = prompt_id.value + ".txt"
                raw = (root / filename).read_bytes()
                digest = sha256_bytes(raw)
                pinned = manifest.get(filename, {}).get("sha256")
                if digest != pinned:
                    raise TemplateIntegrityError(
                        f"{filename}: digest {digest} does not match manifest {pinned}"
                    )
                system, user = _split_template(raw.decode("utf-8"), filename)
                templates[prompt_id] = _StoredTemplate(prompt_id, system, user, digest)
                self._digests[filename] = digest
            self._templates = templates
            return templates

    def get(self, prompt_id: PromptId) -> _StoredTemplate:
        return self._load()[prompt_id]

    def digests(self) -> dict[str, str]:
        self._load()
        return dict(self._digests)


_REGISTRY = _Registry()


def _split_template(text: str, filename: str) -> tuple[str, str]:
    if not text.startswith("SYSTEM:\n"):
        raise TemplateIntegrityError(f"{filename}: missing SYSTEM: header")
    body = text[len("SYSTEM:\n"):]
    marker = "\n\nUSER:\n"
    split_at = body.find(marker)
    if split_at == -1:
        raise TemplateIntegrityError(f"{filename}: missing USER: header")
    system = body[:split_at]
    user = body[split_at + len(marker):]
    if user.endswith("\n"):
        user = user[:-1]
    return system, user


def template_digests() -> dict[str, str]:
    """Pinned SHA-256 per template file, for run manifests and audits."""
    return _REGISTRY.digests()


def template_text(prompt_id: PromptId) -> tuple[str, str]:
    """(system, user) text of a stored template, slots unbound."""
    stored = _REGISTRY.get(prompt_id)
    return stored.system, stored.user


def render_claim_list(claims: Sequence[str]) -> str:
    """Format claims as "claimK: <text>" lines, K counting from 1."""
    if not claims:
        raise EmptyClaims("cannot render an empty claim list")
    return "\n".join(f"claim{i}: {text}" for i, text in enumerate(claims, start=1))


def render_object_string(labels: Iterable[str]) -> str:
    """Period-joined object vocabulary for the attribute template; "none" if empty."""
    joined = ".".join(labels)
    return joined if joined else "none"


def render(
    prompt_id: PromptId,
    bindings: Mapping[str, str],
    images: Sequence[ImageRef] = (),
) -> RenderedPrompt:
    """Bind slot values into a stored template.

    ``bindings`` must supply exactly the slots the template declares;
    anything missing raises :class:`MissingSlot`, anything extra raises
    :class:`UnknownSlot`. Substitution is one pass over the stored text, so
    bound values are inserted verbatim and never re-scanned.
    """
    stored = _REGISTRY.get(prompt_id)
    slots = _SLOTS[prompt_id]
    for slot in slots:
        if slot not in bindings:
            raise MissingSlot(slot)
    for name in bindings:
        if name not in slots:
            raise UnknownSlot(name)
    if images and prompt_id not in _ATTACHMENT_OK:
        raise ValueError(f"template {prompt_id.value} does not take image attachments")

    pattern = re.compile(r"\{(" + "|".join(re.escape(s) for s in slots) + r")\}")
    user = pattern.sub(lambda match: bindings[match.group(1)], stored.user)
    return RenderedPrompt(system=stored.system, user=user, attachments=tuple(images))
