"""Exception hierarchy shared across the platform."""

from __future__ import annotations


class PlatformError(Exception):
    """Base class for every error raised by this package."""


class NonCanonicalizable(PlatformError, ValueError):
    pass


class MissingDigest(PlatformError):
    pass


class MissingProduct(PlatformError):
    pass


class IncompleteJob(PlatformError):
    pass


class AlreadySigned(PlatformError):
    pass


class KeyUnavailable(PlatformError):
    """Signing or verification key could not be loaded."""


# storage
class StorageError(PlatformError):
    pass


class ImmutabilityViolation(StorageError):
    pass


class StorageFull(StorageError):
    pass


class NotFound(StorageError):
    pass


class IntegrityError(StorageError):
    pass


class NotOwner(StorageError):
    pass


class GrantExpired(StorageError):
    pass


class InvalidToken(StorageError):
    pass


# orchestrator
class OrchestratorError(PlatformError):
    pass


class ValidationFailed(OrchestratorError):
    def __init__(self, field: str, reason: str = "") -> None:
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}" if reason else field)


class Unauthorized(OrchestratorError):
    pass


class JobNotFound(OrchestratorError, NotFound):
    pass


class StaleLease(OrchestratorError):
    pass


class MissingAttestation(OrchestratorError):
    pass


class MissingOutputs(OrchestratorError):
    pass


class IllegalTransition(OrchestratorError):
    pass


# trainer / worker
class MalformedCsv(PlatformError):
    pass


class NonFiniteLoss(PlatformError):
    pass


class InputTamperDetected(PlatformError):
    pass


class HarnessSetupFailed(PlatformError):
    pass
