"""Node-local write staging for shared-file output.

Ranks write through MPI-IO style collective verbs into per-node cache segments;
a per-node syncer drains sealed segments to the remote file in the background,
and recovery rebuilds the remote file from the caches after a crash.
"""

from .errors import StagedIOError
from .facade import (
    FileView,
    JobGroup,
    file_close,
    file_open,
    file_set_view,
    file_sync,
    file_write_all,
    finalize,
)

__version__ = "0.1.0"

__all__ = [
    "FileView",
    "JobGroup",
    "StagedIOError",
    "file_close",
    "file_open",
    "file_set_view",
    "file_sync",
    "file_write_all",
    "finalize",
]
