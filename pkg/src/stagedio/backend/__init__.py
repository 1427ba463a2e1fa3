"""Remote targets the syncer writes back to."""

from ..errors import ArgumentError
from .posix import PosixBackend
from .s3 import S3Backend


def open_backend(locator, bw_limit=None, **kwargs):
    """Build a backend from ``posix:PATH`` or ``s3:http(s)://host:port/bucket/key``."""
    kind, sep, rest = locator.partition(":")
    if not sep or not rest:
        raise ArgumentError(f"bad backend locator {locator!r}")
    if bw_limit is not None and bw_limit <= 0:
        raise ArgumentError("bw_limit must be positive")
    if kind == "posix":
        return PosixBackend(rest, bw_limit=bw_limit)
    if kind == "s3":
        return S3Backend(locator, **kwargs)
    raise ArgumentError(f"unknown backend kind {kind!r}")


__all__ = ["PosixBackend", "S3Backend", "open_backend"]
