"""Exception hierarchy shared by the engine, facade, syncer and recovery tool."""


class StagedIOError(Exception):
    """Base class for every error raised by stagedio."""


class ArgumentError(StagedIOError, ValueError):
    pass


class SetupError(StagedIOError):
    """Cache directory missing, unwritable or otherwise unusable."""


class ConflictError(StagedIOError):
    """A session for the same (target, rank, epoch) is already open."""


class UnstagedModeError(StagedIOError):
    """The requested open mode cannot be staged (anything but write-only)."""


class SessionClosedError(StagedIOError):
    pass


class ProtocolError(StagedIOError):
    """Epoch or collective protocol violated."""


class CollectiveError(ProtocolError):
    def __init__(self, message, rank=None):
        super().__init__(message if rank is None else f"rank {rank}: {message}")
        self.rank = rank


class UnsupportedOverlapError(StagedIOError):
    """A write would run across the boundary of a sealed segment of the same epoch."""


class NamingCollisionError(StagedIOError):
    pass


class IntegrityError(StagedIOError):
    """Chunk list failed its footer check or references a missing segment."""


class PlanError(StagedIOError):
    pass


class BackendError(StagedIOError):
    """Retriable failure talking to the remote backend."""


class WritebackFailed(StagedIOError):
    """A writeback exhausted its retries; inputs were left in place."""


class RecoveryError(StagedIOError):
    pass
