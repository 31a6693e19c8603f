"""glibc allocator tuning for many short-lived, mid-sized numpy temporaries.

Training allocates and frees arrays of a few hundred kilobytes on every
step.  glibc serves those with ``mmap`` and returns them on free, so each
step pays page faults for fresh memory.  Raising the mmap and trim
thresholds keeps that memory in the heap.  Process-global; the CLI and the
grid workers opt in, importing the library does not.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator(threshold: int = 256 * 2**20) -> bool:
    """Apply the thresholds once; returns False where glibc is unavailable."""
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = all(mallopt(opt, val) == 1 for opt, val in (
        (_M_MMAP_THRESHOLD, threshold), (_M_TRIM_THRESHOLD, 4 * threshold), (_M_TOP_PAD, threshold // 4)))
    _done = ok
    return ok
