"""Registry of live numeric buffers, for deterministic memory accounting.

Process RSS depends on allocator behavior and platform; benchmark memory is
instead defined as the total bytes of arrays the pipeline registers here and
still holds alive: parameters, optimizer state, batch arrays, activation
caches, and gradients. Registration is explicit (``track``); release is
automatic via weakref finalizers when the array is garbage collected, which
under CPython refcounting happens deterministically.

Small bookkeeping temporaries that die within an expression are not counted;
the definition is documented, not claimed equivalent to any external tool.
"""

from __future__ import annotations

import threading
import weakref

_lock = threading.Lock()
_current = 0
_peak = 0
_live_ids: set[int] = set()


def _release(key: int, nbytes: int) -> None:
    global _current
    with _lock:
        if key in _live_ids:
            _live_ids.discard(key)
            _current -= nbytes


def track(arr):
    """Register a numeric buffer; returns it unchanged for chaining.
    Idempotent while the same object stays alive."""
    global _current, _peak
    nbytes = getattr(arr, "nbytes", None)
    if nbytes is None:
        return arr
    key = id(arr)
    with _lock:
        if key in _live_ids:
            return arr
        _live_ids.add(key)
        _current += int(nbytes)
        if _current > _peak:
            _peak = _current
    weakref.finalize(arr, _release, key, int(nbytes))
    return arr


def current_bytes() -> int:
    return _current


def peak_bytes() -> int:
    return _peak


def live_count() -> int:
    return len(_live_ids)


def reset_peak() -> None:
    """Restart the high-water mark at the current live total."""
    global _peak
    with _lock:
        _peak = _current
