from __future__ import annotations

import os
from collections import Counter
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from threatgap import kernels


@contextmanager
def numba_flag(value: str):
    old = os.environ.get("THREATGAP_DISABLE_NUMBA")
    os.environ["THREATGAP_DISABLE_NUMBA"] = value
    try:
        yield
    finally:
        if old is None:
            os.environ.pop("THREATGAP_DISABLE_NUMBA", None)
        else:
            os.environ["THREATGAP_DISABLE_NUMBA"] = old


BACKENDS = sorted(kernels.IMPLEMENTATIONS)
codes_arrays = hnp.arrays(np.int64, st.integers(0, 300), elements=st.integers(-1, 12))
wide_arrays = hnp.arrays(np.int64, st.integers(0, 300), elements=st.integers(-(2**40), 2**40))


def factorize_oracle(x):
    first: dict[int, int] = {}
    codes = [first.setdefault(int(v), len(first)) for v in x]
    counts = Counter(codes)
    return codes, [counts[i] for i in range(len(first))]


def test_numba_is_available_here():
    # The sandbox ships numba, so both paths are exercised below.
    assert BACKENDS == ["numba", "numpy"]


@pytest.mark.parametrize("name", BACKENDS)
@settings(max_examples=150, deadline=None)
@given(x=wide_arrays)
def test_factorize_matches_oracle(name, x):
    codes, counts = kernels.IMPLEMENTATIONS[name]["factorize"](x)
    want_codes, want_counts = factorize_oracle(x)
    assert codes.dtype == np.int64 and counts.dtype == np.int64
    assert codes.tolist() == want_codes
    assert counts.tolist() == want_counts


@pytest.mark.parametrize("name", BACKENDS)
@settings(max_examples=150, deadline=None)
@given(codes=codes_arrays)
def test_column_summary_matches_oracle(name, codes):
    nulls, distinct, biggest = kernels.IMPLEMENTATIONS[name]["column_summary"](codes)
    valid = Counter(int(v) for v in codes if v >= 0)
    assert (nulls, distinct, biggest) == (
        int((codes < 0).sum()), len(valid), max(valid.values(), default=0))


@pytest.mark.parametrize("name", BACKENDS)
@settings(max_examples=150, deadline=None)
@given(ts=wide_arrays, a=st.integers(-(2**41), 2**41), b=st.integers(-(2**41), 2**41))
def test_window_mask_is_inclusive(name, ts, a, b):
    mask = kernels.IMPLEMENTATIONS[name]["window_mask"](ts, a, b)
    assert mask.dtype == bool
    assert mask.tolist() == [a <= int(t) <= b for t in ts]


@settings(max_examples=100, deadline=None)
@given(x=codes_arrays)
def test_backends_agree(x):
    np_impl, nb_impl = kernels.IMPLEMENTATIONS["numpy"], kernels.IMPLEMENTATIONS["numba"]
    for fn in ("factorize", "column_summary"):
        a, b = np_impl[fn](x), nb_impl[fn](x)
        assert [np.asarray(v).tolist() for v in a] == [np.asarray(v).tolist() for v in b]
    assert np.array_equal(np_impl["window_mask"](x, 0, 5), nb_impl["window_mask"](x, 0, 5))


@pytest.mark.parametrize("value,expected", [
    ("", "numba"), ("0", "numba"), ("1", "numpy"), ("true", "numpy"),
    ("YES", "numpy"), (" on ", "numpy"), ("no", "numba"),
])
def test_env_flag_selects_backend(monkeypatch, value, expected):
    monkeypatch.setenv("THREATGAP_DISABLE_NUMBA", value)
    assert kernels.active_backend() == expected


def test_public_kernels_route_through_flag(monkeypatch):
    calls = []
    fake = {k: (lambda *a, _k=k: calls.append(_k) or (np.zeros(0, np.int64),) * 2)
            for k in ("factorize", "column_summary", "window_mask")}
    monkeypatch.setitem(kernels.IMPLEMENTATIONS, "numpy", fake)
    monkeypatch.setenv("THREATGAP_DISABLE_NUMBA", "1")
    kernels.factorize(np.arange(3))
    kernels.column_summary(np.arange(3))
    kernels.window_mask(np.arange(3), 0, 1)
    assert calls == ["factorize", "column_summary", "window_mask"]


@pytest.mark.parametrize("flag", ["", "1"])
@settings(max_examples=60, deadline=None)
@given(cols=st.integers(1, 4).flatmap(lambda k: st.integers(0, 80).flatmap(
    lambda n: st.lists(hnp.arrays(np.int64, n, elements=st.integers(-1, 3)), min_size=k, max_size=k))))
def test_group_codes_matches_tuple_grouping(flag, cols):
    # monkeypatch is function-scoped and does not mix with @given
    with numba_flag(flag):
        codes, counts = kernels.group_codes(cols)
    keys = [tuple(int(c[i]) for c in cols) for i in range(len(cols[0]))]
    first: dict[tuple, int] = {}
    want = [first.setdefault(k, len(first)) for k in keys]
    assert codes.tolist() == want
    assert counts.tolist() == [Counter(want)[g] for g in range(len(first))]


def test_group_codes_needs_a_column():
    with pytest.raises(ValueError):
        kernels.group_codes([])


def test_interner():
    it = kernels.Interner()
    assert it.encode(["a", None, 1, "1", "a", True]).tolist() == [0, -1, 1, 2, 0, 3]
