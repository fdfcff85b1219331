"""Shared exception types."""


class NBReviveError(Exception):
    """Base class for all package errors."""


class MalformedNotebook(NBReviveError):
    """Input is not a readable notebook JSON document."""


class UnsupportedFormat(NBReviveError):
    """Notebook format version outside the supported range."""


class PatchParseError(NBReviveError):
    """Cell-delimited text does not follow the wire format."""


class NoCodeBlock(NBReviveError):
    """LLM response contained no complete fenced code block."""


class TokenBudgetExceeded(NBReviveError):
    """Prompt would exceed the model context cutoff."""


class ZeroTarget(NBReviveError):
    """Score deviation is undefined for a zero target score."""


class MetricDomainError(NBReviveError):
    """Metric inputs outside the metric's domain."""


class PackageUnknown(NBReviveError):
    """Package absent from the release index."""


class NoInstallableRelease(NBReviveError):
    """Every release of the package is yanked."""


class ExecutorUnavailable(NBReviveError):
    """Execution backend cannot run (missing runtime, missing fixture entry)."""


class GatewayError(NBReviveError):
    """Base class for LLM gateway failures."""


class GatewayTimeout(GatewayError):
    """Remote endpoint did not answer within the retry budget."""


class AuthError(GatewayError):
    """Credential rejected by the remote endpoint."""


class RateLimited(GatewayError):
    """Remote endpoint kept rate-limiting past the retry budget."""


class LengthMismatch(NBReviveError):
    """Paired vectors differ in length."""


class EmptyGroup(NBReviveError):
    """Effect size requested over an empty group."""
