"""Live-tensor accounting for the constant-memory contract.

The fixed-point engine registers every iterate-sized array it retains; a
weakref finalizer decrements the live count the moment CPython drops the
last reference. Because histories are bounded deques, the peak live count
reaches a plateau after a few iterations and is independent of how many
iterations a solve runs - which is exactly what the tests assert.

Disabled by default (zero overhead beyond one if-check).
"""

from __future__ import annotations

import weakref

_enabled = False
_live = 0
_peak = 0


def enable() -> None:
    global _enabled
    _enabled = True


def disable() -> None:
    global _enabled
    _enabled = False


def reset() -> None:
    global _live, _peak
    _live = 0
    _peak = 0


def _drop():
    global _live
    _live -= 1


def track(arr):
    """Register an array as live; returns it unchanged."""
    global _live, _peak
    if _enabled:
        _live += 1
        _peak = max(_peak, _live)
        weakref.finalize(arr, _drop)
    return arr


def live() -> int:
    return _live


def peak() -> int:
    return _peak
