"""Tool-augmented multimodal hallucination detection and its evaluation harness.

The pipeline takes an image-text pair, extracts (or receives) its claims,
routes each claim to aspect-oriented tools via model-formulated queries, runs
the tools concurrently, and asks the underlying model for a per-claim verdict
grounded in the pooled evidence. The harness side scores claim, segment, and
response-level predictions against gold labels with per-class P/R/F1,
accuracy, macro-F1, annotator agreement, and per-category recall.
"""

from .bench import BenchmarkFile, convert_predictions, load, save, stats
from .cache import CacheKey, DiskCache
from .errors import HalodetError
from .executor import (
    BatchOutcome,
    DetectionResult,
    TraceRecord,
    run_batch,
    run_detection,
    write_run_dir,
)
from .gateway import (
    DecodeParams,
    ModelGateway,
    ModelRequest,
    ModelResponse,
    MockModelBackend,
    PurposeTag,
    RetryPolicy,
    TokenBucket,
)
from .metrics import (
    MetricLevel,
    MetricsReport,
    RatingsMatrix,
    derive_response_label,
    derive_segment_label,
    fleiss_kappa,
    per_category_recall,
    prf1,
    report,
)
from .model import (
    Claim,
    Evidence,
    EvidenceBundle,
    HallucinationCategory,
    ImageRef,
    ImageTextPair,
    Label,
    NormBox,
    ParseFlag,
    Segment,
    TaskType,
    Verdict,
    validate_norm_box,
    validate_pair,
)
from .prompts import RenderedPrompt, SupplementalId, TemplateId, render, render_claim_list
from .stages import (
    ClaimQueries,
    DetectionMethod,
    SelfCheckDemo,
    ToolPlan,
    extract_claims,
    formulate_queries,
    parse_claim_query_map,
    parse_verdicts,
    self_check,
    verify,
)
from .tools import (
    FactSnippet,
    ToolBackendSet,
    answer_attribute,
    detect_objects,
    format_evidence_sections,
    read_scene_text,
    search_facts,
)

__version__ = "0.1.0"

__all__ = [
    "BenchmarkFile",
    "BatchOutcome",
    "CacheKey",
    "Claim",
    "ClaimQueries",
    "DecodeParams",
    "DetectionMethod",
    "DetectionResult",
    "DiskCache",
    "Evidence",
    "EvidenceBundle",
    "FactSnippet",
    "HallucinationCategory",
    "HalodetError",
    "ImageRef",
    "ImageTextPair",
    "Label",
    "MetricLevel",
    "MetricsReport",
    "MockModelBackend",
    "ModelGateway",
    "ModelRequest",
    "ModelResponse",
    "NormBox",
    "ParseFlag",
    "PurposeTag",
    "RatingsMatrix",
    "RenderedPrompt",
    "RetryPolicy",
    "Segment",
    "SelfCheckDemo",
    "SupplementalId",
    "TaskType",
    "TemplateId",
    "TokenBucket",
    "ToolBackendSet",
    "ToolPlan",
    "TraceRecord",
    "Verdict",
    "answer_attribute",
    "convert_predictions",
    "derive_response_label",
    "derive_segment_label",
    "detect_objects",
    "extract_claims",
    "fleiss_kappa",
    "format_evidence_sections",
    "formulate_queries",
    "load",
    "parse_claim_query_map",
    "parse_verdicts",
    "per_category_recall",
    "prf1",
    "read_scene_text",
    "render",
    "render_claim_list",
    "report",
    "run_batch",
    "run_detection",
    "save",
    "search_facts",
    "self_check",
    "stats",
    "validate_norm_box",
    "validate_pair",
    "verify",
    "write_run_dir",
]
