"""Exception hierarchy shared by all pipeline stages."""

from __future__ import annotations


class NolaError(Exception):
    """Base class for every error raised by this package."""


# -- data ingestion ---------------------------------------------------------


class MissingFile(NolaError, FileNotFoundError):
    pass


class SchemaViolation(NolaError, ValueError):
    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class EmptyClassList(NolaError, ValueError):
    pass


class MissingClass(NolaError, KeyError):
    def __init__(self, classes):
        self.classes = list(classes)
        super().__init__(", ".join(self.classes))

    def __str__(self) -> str:
        return "classes missing from description cache: " + ", ".join(self.classes)


class ParseError(NolaError, ValueError):
    pass


class EmptySplit(NolaError, ValueError):
    pass


class LabelLeakError(NolaError, RuntimeError):
    """Raised when training code reads a ground-truth label."""


# -- LLM client -------------------------------------------------------------


class ClientUnavailable(NolaError, ConnectionError):
    pass


class PlaceholderMissing(NolaError, ValueError):
    pass


class RateLimited(NolaError, RuntimeError):
    """A call was throttled or timed out.

    ``partial`` holds the descriptions completed before giving up, keyed by
    class name; ``failed`` lists the ``(class_name, template)`` pairs that
    did not complete.
    """

    def __init__(self, message: str = "rate limited", *, retry_after: float | None = None,
                 partial: dict | None = None, failed: list | None = None):
        super().__init__(message)
        self.retry_after = retry_after
        self.partial = partial or {}
        self.failed = failed or []

    @property
    def completed(self) -> int:
        return sum(len(v) for v in self.partial.values())


# -- encoders / classifier --------------------------------------------------


class EmptyInput(NolaError, ValueError):
    pass


class ShapeMismatch(NolaError, ValueError):
    pass


class WidthMismatch(NolaError, ValueError):
    pass


class DimMismatch(NolaError, ValueError):
    pass


class DegenerateClass(NolaError, ValueError):
    def __init__(self, class_name: str, norm: float):
        self.class_name = class_name
        self.norm = norm
        super().__init__(f"mean description embedding of {class_name!r} has norm {norm:.3g}")


# -- pseudo-label selection -------------------------------------------------


class InvalidCounts(NolaError, ValueError):
    pass


class AlignmentMismatch(NolaError, ValueError):
    pass


# -- training ---------------------------------------------------------------


class InvalidEpsilon(NolaError, ValueError):
    pass


class LabelOutOfRange(NolaError, ValueError):
    pass


class EmptyPseudoSet(NolaError, ValueError):
    pass


class UntrainedHead(NolaError, RuntimeError):
    pass


class UntrainedDL(UntrainedHead):
    pass


# -- checkpoints / runner ---------------------------------------------------


class MissingCheckpoint(NolaError, FileNotFoundError):
    pass


class VersionMismatch(NolaError, ValueError):
    pass


class CorruptFile(NolaError, ValueError):
    pass


class ConfigError(NolaError, ValueError):
    pass


class StageError(NolaError, RuntimeError):
    """Wraps an error raised inside a pipeline stage, tagging the stage."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
