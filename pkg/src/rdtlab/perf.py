"""Process-level performance tuning for allocation-heavy training loops.

Reverse-mode autodiff keeps every forward activation alive until backward
finishes, so each step allocates tens of MB that glibc would otherwise mmap
in and munmap out, paying page-fault costs every step. Raising the mmap and
trim thresholds keeps that memory on the heap, where it is reused across
steps. Roughly halves step time on the training loops here and is harmless
elsewhere. No-op on platforms without glibc's mallopt.
"""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator():
    global _done
    if _done:
        return
    _done = True
    try:
        name = ctypes.util.find_library("c")
        libc = ctypes.CDLL(name) if name else ctypes.CDLL(None)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    except (OSError, AttributeError):
        pass
