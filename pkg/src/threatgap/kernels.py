"""Integer kernels behind aggregation, column statistics and window filtering.

Each kernel has a pure-numpy implementation and a numba ``@njit`` twin.  The
numba path is used when numba imports and ``THREATGAP_DISABLE_NUMBA`` is unset
(any of ``1``, ``true``, ``yes``, ``on`` disables it).  Both paths return identical
arrays; ``tests/test_kernels.py`` checks that on random inputs.

All inputs are int64 code arrays: callers factorize strings/timestamps first,
with ``-1`` standing for null.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

_FLAG = "THREATGAP_DISABLE_NUMBA"


def _numba_disabled() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


try:  # pragma: no cover - exercised implicitly depending on environment
    import numba
except ImportError:  # pragma: no cover
    numba = None


# ---------------------------------------------------------------------------
# numpy implementations


def _factorize_np(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense codes numbered by first appearance, plus per-code counts."""
    x = np.asarray(x, dtype=np.int64)
    if x.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    _, first, inverse, counts = np.unique(
        x, return_index=True, return_inverse=True, return_counts=True
    )
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return rank[inverse.reshape(-1)].astype(np.int64), counts[order].astype(np.int64)


def _column_summary_np(codes: np.ndarray) -> tuple[int, int, int]:
    codes = np.asarray(codes, dtype=np.int64)
    valid = codes[codes >= 0]
    nulls = int(codes.size - valid.size)
    if valid.size == 0:
        return nulls, 0, 0
    counts = np.bincount(valid)
    nz = counts[counts > 0]
    return nulls, int(nz.size), int(nz.max())


def _window_mask_np(ts: np.ndarray, start: int, end: int) -> np.ndarray:
    ts = np.asarray(ts, dtype=np.int64)
    return (ts >= start) & (ts <= end)


# ---------------------------------------------------------------------------
# numba implementations

if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def _factorize_nb(x):  # pragma: no cover - compiled
        n = x.shape[0]
        codes = np.empty(n, np.int64)
        counts = np.zeros(n, np.int64)
        seen = numba.typed.Dict.empty(key_type=numba.types.int64, value_type=numba.types.int64)
        nxt = 0
        for i in range(n):
            v = x[i]
            if v in seen:
                c = seen[v]
            else:
                c = nxt
                seen[v] = c
                nxt += 1
            codes[i] = c
            counts[c] += 1
        return codes, counts[:nxt].copy()

    @numba.njit(cache=True, nogil=True)
    def _column_summary_nb(codes):  # pragma: no cover - compiled
        n = codes.shape[0]
        top = -1
        for i in range(n):
            if codes[i] > top:
                top = codes[i]
        nulls = 0
        counts = np.zeros(top + 1, np.int64)
        for i in range(n):
            c = codes[i]
            if c < 0:
                nulls += 1
            else:
                counts[c] += 1
        distinct = 0
        biggest = 0
        for j in range(top + 1):
            if counts[j] > 0:
                distinct += 1
                if counts[j] > biggest:
                    biggest = counts[j]
        return nulls, distinct, biggest

    @numba.njit(cache=True, nogil=True)
    def _window_mask_nb(ts, start, end):  # pragma: no cover - compiled
        out = np.empty(ts.shape[0], np.bool_)
        for i in range(ts.shape[0]):
            out[i] = ts[i] >= start and ts[i] <= end
        return out

else:  # pragma: no cover
    _factorize_nb = _column_summary_nb = _window_mask_nb = None


def _wrap_factorize_nb(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.ascontiguousarray(x, dtype=np.int64)
    if x.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return _factorize_nb(x)


def _wrap_column_summary_nb(codes: np.ndarray) -> tuple[int, int, int]:
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    if codes.size == 0:
        return 0, 0, 0
    nulls, distinct, biggest = _column_summary_nb(codes)
    return int(nulls), int(distinct), int(biggest)


def _wrap_window_mask_nb(ts: np.ndarray, start: int, end: int) -> np.ndarray:
    return _window_mask_nb(np.ascontiguousarray(ts, dtype=np.int64), np.int64(start), np.int64(end))


IMPLEMENTATIONS: dict[str, dict[str, Callable]] = {
    "numpy": {
        "factorize": _factorize_np,
        "column_summary": _column_summary_np,
        "window_mask": _window_mask_np,
    }
}
if numba is not None:
    IMPLEMENTATIONS["numba"] = {
        "factorize": _wrap_factorize_nb,
        "column_summary": _wrap_column_summary_nb,
        "window_mask": _wrap_window_mask_nb,
    }


def active_backend() -> str:
    if numba is None or _numba_disabled():
        return "numpy"
    return "numba"


def _impl(name: str) -> Callable:
    return IMPLEMENTATIONS[active_backend()][name]


def factorize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return _impl("factorize")(x)


def column_summary(codes: np.ndarray) -> tuple[int, int, int]:
    """Return ``(null_count, distinct_count, largest_group_size)`` for one code column."""
    return _impl("column_summary")(codes)


def window_mask(ts: np.ndarray, start: int, end: int) -> np.ndarray:
    """Boolean mask of ``start <= ts <= end``."""
    return _impl("window_mask")(ts, start, end)


def group_codes(columns: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Group rows by the tuple of their codes across ``columns``.

    Columns are folded in pairwise, refactorizing after each step so the
    combined code never exceeds ``n * cardinality`` and cannot overflow.
    Group ids follow first appearance in row order.
    """
    if not columns:
        raise ValueError("group_codes needs at least one column")
    fact = _impl("factorize")
    codes, counts = fact(np.asarray(columns[0], dtype=np.int64))
    for col in columns[1:]:
        sub, sub_counts = fact(np.asarray(col, dtype=np.int64))
        combined = codes * np.int64(max(sub_counts.size, 1)) + sub
        codes, counts = fact(combined)
    return codes, counts


class Interner:
    """Maps arbitrary hashable scalars to dense int codes; ``None`` -> -1."""

    __slots__ = ("_codes",)

    def __init__(self) -> None:
        self._codes: dict[object, int] = {}

    def code(self, value: object) -> int:
        if value is None:
            return -1
        key = (type(value).__name__, value)
        c = self._codes.get(key)
        if c is None:
            c = self._codes[key] = len(self._codes)
        return c

    def encode(self, values: Sequence[object]) -> np.ndarray:
        return np.fromiter((self.code(v) for v in values), dtype=np.int64, count=len(values))
