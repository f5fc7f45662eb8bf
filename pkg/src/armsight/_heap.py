"""Keep large transient buffers on the glibc heap instead of mmap.

Training allocates and frees the same multi-hundred-MB scratch arrays every
step. With glibc defaults those go through mmap/munmap, so every step pays
first-touch page faults on gigabytes of memory. Disabling mmap for malloc and
heap trimming lets freed blocks be reused warm. No-op on non-glibc platforms.
"""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_MAX = -4


def tune() -> bool:
    try:
        name = ctypes.util.find_library("c") or "libc.so.6"
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_MAX, 0)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 2**31 - 1)
        return bool(ok)
    except (OSError, AttributeError):
        return False
