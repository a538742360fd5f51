"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class ReshootError(Exception):
    """Base class for all engine errors."""


# screenplay


class MalformedJson(ReshootError):
    pass


class SchemaViolation(ReshootError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class UnknownScene(ReshootError, KeyError):
    pass


class UnknownShot(ReshootError, KeyError):
    pass


class UnknownCharacter(ReshootError, KeyError):
    pass


# visual memory


class AspectRatioMismatch(ReshootError):
    pass


class UnreadableImage(ReshootError):
    pass


class InvalidDNA(ReshootError):
    pass


class MissingAnchor(ReshootError):
    def __init__(self, kind: str, ident: str):
        super().__init__(f"missing {kind} anchor for {ident}")
        self.kind = kind
        self.ident = ident


# grid


class HeterogeneousBatch(ReshootError):
    pass


class DimensionMismatch(ReshootError):
    pass


class WrongCount(ReshootError):
    pass


# backends


class TransportError(ReshootError):
    """Transient failure talking to a backend; safe to retry."""


class BackendRefusal(ReshootError):
    """The backend declined the request. Never retried."""


class NonconformingOutput(ReshootError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class PreconditionViolation(ReshootError, ValueError):
    pass


# verifier


class BothPathsUnavailable(ReshootError):
    pass


# pipeline


class UnderstandingFailed(ReshootError):
    pass


class ConfigError(ReshootError):
    pass


class IncompleteRun(ReshootError):
    pass


class CorruptManifest(ReshootError):
    pass


class RunInterrupted(ReshootError):
    """Raised when a run is deliberately stopped at a stage boundary."""


# bench


class EmptyJoin(ReshootError):
    pass


class MissingPortrait(ReshootError):
    pass


class InsufficientSamples(ReshootError):
    pass


class IoFailure(ReshootError):
    pass
