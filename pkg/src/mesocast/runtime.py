"""Process-level performance knobs.

Training and batched evaluation allocate a stream of multi-megabyte
transient arrays.  With glibc defaults every such block is mmap'd and
unmapped again, so each pass re-faults its whole working set; raising the
malloc mmap/trim thresholds lets the heap recycle those blocks and roughly
halves full-batch epoch time on memory-bound hosts.  Best effort: silently
does nothing off glibc/Linux.
"""

from __future__ import annotations

import ctypes
import sys

_M_MMAP_THRESHOLD = -3
_M_TRIM_THRESHOLD = -1

_tuned = False


def tune_allocator() -> None:
    global _tuned
    if _tuned or not sys.platform.startswith("linux"):
        return
    _tuned = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, 64 * 1024 * 1024)
        libc.mallopt(_M_TRIM_THRESHOLD, 256 * 1024 * 1024)
    except OSError:
        pass
