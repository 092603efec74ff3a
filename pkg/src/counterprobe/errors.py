"""Exception types raised across the package.

Each carries a stable ``code`` used by the HTTP error envelope, plus a
``retriable`` hint: True means the same request may succeed later without
any change on the caller's side.
"""
from __future__ import annotations


class CounterprobeError(Exception):
    code = "internal_error"
    retriable = False


class DuplicateVersionError(CounterprobeError):
    code = "duplicate_version"


class UnknownVersionError(CounterprobeError):
    code = "unknown_version"


class EmptyPopulationError(CounterprobeError):
    code = "empty_population"


class SpoliationSignal(CounterprobeError):
    """Evaluation refused: the requested version was not retained."""

    code = "version_not_retained"


class UnknownDomainError(CounterprobeError):
    code = "unknown_domain"


class FieldMissingError(CounterprobeError):
    code = "field_missing"


class StaleInstanceError(CounterprobeError):
    """The instance's original_value no longer matches the record."""

    code = "stale_instance"


class MalformedInstanceError(CounterprobeError):
    code = "malformed_instance"


class WindowExpiredError(CounterprobeError):
    code = "window_expired"


class DuplicateSessionError(CounterprobeError):
    code = "duplicate_session"


class NotAdverseError(CounterprobeError):
    code = "not_adverse"


class BudgetExhaustedError(CounterprobeError):
    code = "budget_exhausted"


class CrossAppLimitExceededError(CounterprobeError):
    """Monthly cross-application query allowance is spent."""

    code = "cross_app_limit_exceeded"
    retriable = True  # resets at the next UTC month


class SessionClosedError(CounterprobeError):
    code = "session_closed"


class UnknownSessionError(CounterprobeError):
    code = "unknown_session"


class VersionMismatchError(CounterprobeError):
    code = "version_mismatch"


class UnresolvableClassError(CounterprobeError):
    code = "unresolvable_class"


class InsufficientReplicatesError(CounterprobeError):
    code = "insufficient_replicates"


class InsufficientProbesError(CounterprobeError):
    code = "insufficient_probes"


class AccessDeniedError(CounterprobeError):
    code = "access_denied"


class DelayedAccessError(CounterprobeError):
    """Access becomes available only after ``retry_at``."""

    code = "delayed_access"
    retriable = True

    def __init__(self, message: str, retry_at):
        super().__init__(message)
        self.retry_at = retry_at


class MediatedAccessError(CounterprobeError):
    code = "mediated_access_required"


class AggregateOnlyError(CounterprobeError):
    code = "aggregate_only"


class AggregateGroupError(CounterprobeError):
    code = "non_categorical_group"


class ConfigError(CounterprobeError):
    code = "config_error"
