"""Exception hierarchy shared across the engine.

Everything raised on purpose derives from IcxError so callers (and the CLI)
can separate domain failures from genuine bugs.
"""

from __future__ import annotations


class IcxError(Exception):
    """Base class for all engine errors."""


class SchemaError(IcxError):
    """Malformed input data: corpus rows, config files, manifests."""


class MediaReadError(IcxError):
    """An image referenced by a sample could not be read."""

    def __init__(self, path: str, cause: str = "") -> None:
        self.path = path
        msg = f"cannot read media at {path!r}"
        if cause:
            msg += f": {cause}"
        super().__init__(msg)


class FormatError(IcxError):
    """Model output did not match the expected wire format."""


class UnknownOperationError(IcxError):
    """A toolchain mentions an operation that is not in the graph."""

    def __init__(self, token: str) -> None:
        self.token = token
        super().__init__(f"unknown operation {token!r}")


class PlanningImpossible(IcxError):
    """No candidate toolchain satisfies the active constraints."""


class ResourceExhausted(IcxError):
    """No embedding model in the zoo fits the hardware budget."""


class EmbedError(IcxError):
    """Embedding backend failed after retries."""


class LockError(IcxError):
    """The database writer lock could not be acquired."""


class IntegrityError(IcxError):
    """On-disk database contents failed verification."""

    def __init__(self, filename: str, offset: int, detail: str) -> None:
        self.filename = filename
        self.offset = offset
        super().__init__(f"{filename} corrupt at byte {offset}: {detail}")


class TransportError(IcxError):
    """HTTP policy endpoint unreachable or persistently failing."""


class OracleUnavailable(IcxError):
    """The oracle policy was handed input it has no ruling for."""


class IclError(IcxError):
    """Context assembly or downstream invocation failed."""


class ReportUnavailable(IcxError):
    """Noise metrics requested but ground-truth tags are missing."""
