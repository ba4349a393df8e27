"""Exception hierarchy shared across the package.

Every failure a caller is expected to branch on gets its own class; generic
misuse (wrong types, impossible arguments) raises plain ValueError/TypeError.
"""

from __future__ import annotations


class HalodetError(Exception):
    """Base class for all package-specific errors."""


# --- prompt rendering ---------------------------------------------------


class TemplateError(HalodetError):
    """Base class for template storage and rendering failures."""


class TemplateIntegrityError(TemplateError):
    """A stored template file does not match its pinned digest."""


class EmptyClaims(TemplateError):
    """A claim list to render was empty."""


class MissingSlot(TemplateError):
    def __init__(self, name: str):
        super().__init__(f"template slot not bound: {name!r}")
        self.name = name


class UnknownSlot(TemplateError):
    def __init__(self, name: str):
        super().__init__(f"binding does not match any template slot: {name!r}")
        self.name = name


# --- model gateway and tool backends ------------------------------------


class BackendError(HalodetError):
    """Base class for remote-backend failures."""


class BackendUnavailable(BackendError):
    """Backend unreachable, or retries exhausted on transient failures."""


class AuthFailure(BackendError):
    """Credentials rejected; never retried."""


class PayloadTooLarge(BackendError):
    """Request exceeds what the backend accepts; never retried."""


class QuotaExceeded(BackendError):
    """Search provider quota exhausted."""


class InvalidImage(BackendError):
    """Image bytes missing or unreadable where a tool needs them."""


# --- model-output parsing -----------------------------------------------


class ParseError(HalodetError):
    """Base class for model-output parsing failures."""


class UnparseableModelOutput(ParseError):
    """Raw model text could not be coerced to the expected structure."""


class ClaimCountMismatch(ParseError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected entries for {expected} claims, got {got}")
        self.expected = expected
        self.got = got


class UnknownLabel(ParseError):
    def __init__(self, value: str):
        super().__init__(f"label outside the closed vocabulary: {value!r}")
        self.value = value


class EmptyExtraction(ParseError):
    """Claim extraction produced no claims (or was fed empty text)."""


class MissingDemonstrations(HalodetError):
    """Few-shot self-check requested without demonstration pairs configured."""


# --- cache ----------------------------------------------------------------


class StoreCorrupt(HalodetError):
    """On-disk cache entry failed its integrity check."""


# --- metrics ---------------------------------------------------------------


class MetricsError(HalodetError):
    """Base class for metric computation failures."""


class EmptySegment(MetricsError):
    """Segment label requested for an empty claim-label list."""


class EmptyResponse(MetricsError):
    """Response label requested for an empty segment-label list."""


class LengthMismatch(MetricsError):
    """Prediction and gold vectors differ in length."""


class InvalidMatrix(MetricsError):
    """Ratings matrix violates its shape invariants."""


class DegenerateMarginals(MetricsError):
    """Chance agreement is 1 while observed agreement is not; kappa undefined."""


class MissingCategoryTags(MetricsError):
    """A gold-hallucinatory claim carries no category tags."""


# --- benchmark I/O ----------------------------------------------------------


class SchemaViolation(HalodetError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.reason = message


class UnsupportedVersion(HalodetError):
    def __init__(self, version: str):
        super().__init__(f"unsupported benchmark schema version: {version!r}")
        self.version = version


class MissingPrediction(HalodetError):
    def __init__(self, pair_id: str):
        super().__init__(f"no detection result for pair {pair_id!r}")
        self.pair_id = pair_id


class IndexMismatch(HalodetError):
    """Result claim indices do not line up with the benchmark pair."""


# --- configuration -----------------------------------------------------------


class ConfigInvalid(HalodetError):
    """Run configuration is inconsistent or incomplete."""
