"""Named fault points for crash drills.

Production code calls :func:`hit` at a handful of places; it does nothing unless a
test or the harness has armed that point. An armed point raises
:class:`SimulatedCrash`, which derives from ``BaseException`` so retry loops and
``except Exception`` handlers cannot swallow it, the way a SIGKILL cannot be
handled.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

POINTS = ("chunklist.before_rename", "writeback.mid_run", "syncer.before_consume")


class SimulatedCrash(BaseException):
    def __init__(self, point, info=None):
        super().__init__(f"simulated crash at {point}")
        self.point = point
        self.info = info or {}


_lock = threading.Lock()
_armed: dict[str, list] = {}


def arm(point, after=0, predicate=None):
    """Crash at ``point`` once it has been reached ``after`` times without firing.

    ``predicate(**info)`` may further restrict which hits count. A point fires
    once; the crashed worker is gone, so later hits pass through.
    """
    if point not in POINTS:
        raise ValueError(f"unknown fault point {point!r}")
    with _lock:
        _armed[point] = [after, predicate, False]


def disarm(point=None):
    with _lock:
        if point is None:
            _armed.clear()
        else:
            _armed.pop(point, None)


def fired(point) -> bool:
    with _lock:
        return point in _armed and _armed[point][2]


@contextmanager
def armed(point, after=0, predicate=None):
    arm(point, after, predicate)
    try:
        yield
    finally:
        disarm(point)


def hit(point, **info):
    if not _armed:
        return
    with _lock:
        state = _armed.get(point)
        if state is None:
            return
        remaining, predicate, done = state
        if done or (predicate is not None and not predicate(**info)):
            return
        if remaining > 0:
            state[0] -= 1
            return
        state[2] = True
    raise SimulatedCrash(point, info)
