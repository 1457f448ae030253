"""Hot loops with an optional numba backend.

Set ``SPECCFI_DISABLE_NUMBA=1`` to force the numpy implementation.
"""
from __future__ import annotations

import os

import numpy as np

CMP, JCC = 1, 2


def _scan_numpy(codes: np.ndarray, starts: np.ndarray, window: int, gap: int) -> list[np.ndarray]:
    n = len(codes)
    is_jcc = np.concatenate([codes == JCC, np.zeros(gap + 1, dtype=bool)])
    # jcc_after[i]: a conditional jump among the gap+1 instructions after i
    view = np.lib.stride_tricks.sliding_window_view(is_jcc[1:], gap + 1)
    gadget = (codes == CMP) & view[:n].any(axis=1)
    return [np.flatnonzero(gadget[s:s + window]) for s in starts]


def _scan_flat_py(codes, starts, window, gap):
    n = codes.shape[0]
    counts = np.zeros(starts.shape[0], dtype=np.int64)
    out = np.empty(starts.shape[0] * window, dtype=np.int64)
    k = 0
    for m in range(starts.shape[0]):
        s = starts[m]
        for o in range(window):
            i = s + o
            if i >= n:
                break
            if codes[i] != CMP:
                continue
            for j in range(i + 1, min(i + gap + 2, n)):
                if codes[j] == JCC:
                    out[k] = o
                    k += 1
                    counts[m] += 1
                    break
    return counts, out[:k]


def _numba_enabled() -> bool:
    return os.environ.get("SPECCFI_DISABLE_NUMBA", "") not in ("1", "true", "yes")


_scan_flat_jit = None
if _numba_enabled():
    try:
        import numba

        _scan_flat_jit = numba.njit(cache=False)(_scan_flat_py)
    except ImportError:  # pragma: no cover
        _scan_flat_jit = None

BACKEND = "numba" if _scan_flat_jit is not None else "numpy"


def _scan_numba(codes: np.ndarray, starts: np.ndarray, window: int, gap: int) -> list[np.ndarray]:
    counts, flat = _scan_flat_jit(codes, starts, window, gap)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return [flat[bounds[i]:bounds[i + 1]] for i in range(len(starts))]


def scan_windows(codes: np.ndarray, starts: np.ndarray, window: int, gap: int,
                 backend: str | None = None) -> list[np.ndarray]:
    """Gadget offsets in ``[0, window)`` after each start index.

    A gadget is a compare (code 1) followed by a conditional jump (code 2)
    with at most ``gap`` instructions in between.
    """
    backend = backend or BACKEND
    codes = np.ascontiguousarray(codes, dtype=np.int8)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    if len(codes) == 0:
        return [np.empty(0, dtype=np.int64) for _ in starts]
    if backend == "numba":
        if _scan_flat_jit is None:
            raise RuntimeError("numba backend unavailable")
        return _scan_numba(codes, starts, window, gap)
    if backend == "numpy":
        return _scan_numpy(codes, starts, window, gap)
    raise ValueError(f"unknown backend {backend!r}")
