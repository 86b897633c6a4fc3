"""Exception hierarchy shared by every vera module."""

from __future__ import annotations


class VeraError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(VeraError):
    """A profile, run config or template set cannot be used as given."""


# --- gateway -------------------------------------------------------------


class GatewayError(VeraError):
    pass


class RetriesExhaustedError(GatewayError):
    def __init__(self, profile: str, attempts: int, last_error: BaseException | None) -> None:
        super().__init__(f"{profile}: transport failed after {attempts} attempt(s): {last_error}")
        self.profile = profile
        self.attempts = attempts
        self.last_error = last_error


class CassetteMissError(GatewayError):
    def __init__(self, fingerprint: str) -> None:
        super().__init__(f"no cassette entry for fingerprint {fingerprint}")
        self.fingerprint = fingerprint


class EmptyCompletionError(GatewayError):
    pass


class MockNoMatchError(GatewayError):
    pass


# --- retrieval -----------------------------------------------------------


class InvalidChunkConfigError(VeraError, ValueError):
    pass


class EmptyCorpusError(VeraError):
    pass


class EmbeddingUnavailableError(VeraError):
    pass


class IndexConfigMismatchError(VeraError):
    pass


# --- prompts / pipeline --------------------------------------------------


class RenderError(VeraError, KeyError):
    def __init__(self, placeholder: str) -> None:
        super().__init__(placeholder)
        self.placeholder = placeholder

    def __str__(self) -> str:
        return f"missing binding for placeholder {self.placeholder!r}"


class ParseError(VeraError):
    def __init__(self, stage: str, message: str, raw: str) -> None:
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.raw = raw


class StageError(VeraError):
    """A pipeline stage could not complete; carries the stage name."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class ContractViolationError(StageError):
    pass


# --- datasets ------------------------------------------------------------


class DatasetFormatError(VeraError, ValueError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


class DatasetFormatWarning(UserWarning):
    pass
