"""Desk-scale lab for measuring fact memorization of tiny language models."""

__version__ = "0.1.0"


def _tune_allocator() -> None:
    """Keep glibc from cycling big numpy buffers through mmap/munmap.

    The training loop allocates a few hundred MB of short-lived tensors per
    step; with default malloc tunables every step pays page-fault costs that
    dwarf the arithmetic. Raising the mmap and trim thresholds makes freed
    blocks reusable. No-op off glibc.
    """
    import ctypes
    import ctypes.util

    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6", use_errno=True)
        M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
        libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
    except (OSError, AttributeError):
        pass


_tune_allocator()
