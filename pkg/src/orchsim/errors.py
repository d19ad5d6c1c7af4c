"""Exception types shared across the simulator."""

from __future__ import annotations


class OrchsimError(Exception):
    """Base class for all domain errors raised by this package."""


class DuplicateName(OrchsimError):
    pass


class UnknownNode(OrchsimError):
    pass


class UnknownNamespace(OrchsimError):
    pass


class UnknownPod(OrchsimError):
    pass


class QuotaExceeded(OrchsimError):
    """Admission rejected; carries the names of the violated components."""

    def __init__(self, namespace: str, components: list[str]):
        self.namespace = namespace
        self.components = components
        super().__init__(
            f"namespace {namespace!r} quota exceeded on: {', '.join(components)}"
        )


class IllegalTransition(OrchsimError):
    pass


class InvariantViolation(OrchsimError):
    """Raised by the store's self-checks; indicates a bug, not bad input."""


class UnknownQueue(OrchsimError):
    pass


class UnknownSet(OrchsimError):
    pass


class UnknownMessage(OrchsimError):
    pass


class StaleLease(OrchsimError):
    pass


class UnknownBucket(OrchsimError):
    pass


class NotFound(OrchsimError):
    pass


class UnknownSource(OrchsimError):
    pass


class UnknownSection(OrchsimError):
    pass


class TransferFault(OrchsimError):
    """Retryable simulated transfer failure."""


class BatchFailed(OrchsimError):
    def __init__(self, url: str, attempts: int):
        self.url = url
        self.attempts = attempts
        super().__init__(f"fetch failed for {url!r} after {attempts} attempts")


class DuplicateMember(OrchsimError):
    pass


class EmptyBatch(OrchsimError):
    pass


class UnknownMetric(OrchsimError):
    pass


class EmptyWindow(OrchsimError):
    pass


class UnknownStep(OrchsimError):
    pass


class ParseError(OrchsimError):
    def __init__(self, reason: str, line: int | None = None):
        self.line = line
        self.reason = reason
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"parse error{where}: {reason}")


class ValidationError(OrchsimError):
    pass


class MissingInput(OrchsimError):
    pass


class RunFailed(OrchsimError):
    def __init__(self, step: str, reason: str):
        self.step = step
        self.reason = reason
        super().__init__(f"run failed at step {step!r}: {reason}")


class IoError(OrchsimError):
    pass
