"""Segment reductions used by message passing.

Each kernel exists twice: a numba ``@njit`` loop and a pure-numpy version.
Set ``FORMULANET_NUMBA=0`` in the environment to force the numpy path (also
chosen automatically when numba is not importable).
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("FORMULANET_NUMBA", "1") != "0"


# ---------------------------------------------------------------- numpy


def segment_sum_numpy(values, index, n):
    """``out[index[i]] += values[i]`` for a 2-d ``values``."""
    out = np.zeros((n, values.shape[1]), dtype=values.dtype)
    np.add.at(out, index, values)
    return out


def segment_max_numpy(values, segment, n):
    """Column-wise max per segment and the row achieving it (lowest on ties)."""
    if values.shape[0] == 0 or n == 0:
        raise ValueError("segment_max of empty input")
    order = np.argsort(segment, kind="stable")
    sorted_seg = segment[order]
    starts = np.flatnonzero(np.r_[True, sorted_seg[1:] != sorted_seg[:-1]])
    if len(starts) != n:
        raise ValueError("every segment needs at least one row")
    sv = values[order]
    mx = np.maximum.reduceat(sv, starts, axis=0)
    hit = sv == mx[sorted_seg]
    rows = np.where(hit, order[:, None], values.shape[0])
    arg = np.minimum.reduceat(rows, starts, axis=0)
    return mx, arg.astype(np.int64)


def segment_count_numpy(index, n):
    return np.bincount(index, minlength=n).astype(np.int64)


# ---------------------------------------------------------------- numba

if NUMBA_AVAILABLE:

    @numba.njit(cache=True)
    def segment_sum_numba(values, index, n):
        out = np.zeros((n, values.shape[1]), dtype=values.dtype)
        for i in range(values.shape[0]):
            s = index[i]
            for j in range(values.shape[1]):
                out[s, j] += values[i, j]
        return out

    @numba.njit(cache=True)
    def _segment_max_numba(values, segment, n):
        d = values.shape[1]
        mx = np.empty((n, d), dtype=values.dtype)
        arg = np.full((n, d), -1, dtype=np.int64)
        for i in range(values.shape[0]):
            s = segment[i]
            for j in range(d):
                if arg[s, j] < 0 or values[i, j] > mx[s, j]:
                    mx[s, j] = values[i, j]
                    arg[s, j] = i
        return mx, arg

    def segment_max_numba(values, segment, n):
        if values.shape[0] == 0 or n == 0:
            raise ValueError("segment_max of empty input")
        mx, arg = _segment_max_numba(values, segment, n)
        if (arg < 0).any():
            raise ValueError("every segment needs at least one row")
        return mx, arg

    @numba.njit(cache=True)
    def segment_count_numba(index, n):
        out = np.zeros(n, dtype=np.int64)
        for i in range(index.shape[0]):
            out[index[i]] += 1
        return out

else:  # pragma: no cover
    segment_sum_numba = segment_sum_numpy
    segment_max_numba = segment_max_numpy
    segment_count_numba = segment_count_numpy


def _as_index(index):
    return np.ascontiguousarray(index, dtype=np.int64)


def segment_sum(values, index, n):
    values = np.ascontiguousarray(values)
    if USE_NUMBA:
        return segment_sum_numba(values, _as_index(index), n)
    return segment_sum_numpy(values, _as_index(index), n)


def segment_max(values, segment, n):
    values = np.ascontiguousarray(values)
    if USE_NUMBA:
        return segment_max_numba(values, _as_index(segment), n)
    return segment_max_numpy(values, _as_index(segment), n)


def segment_count(index, n):
    if USE_NUMBA:
        return segment_count_numba(_as_index(index), n)
    return segment_count_numpy(_as_index(index), n)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
