import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moe_steer import _kernels


def _brute(marker_ids, slots, n_markers, n_keys):
    K = np.zeros(n_keys, dtype=np.int64)
    k = np.zeros((n_markers, n_keys), dtype=np.int64)
    M = np.zeros(n_markers, dtype=np.int64)
    for m, row in zip(marker_ids.tolist(), slots.tolist()):
        if m >= 0:
            M[m] += 1
        for e in row:
            if e >= 0:
                K[e] += 1
                if m >= 0:
                    k[m, e] += 1
    return K, k, M


@st.composite
def shards(draw):
    n_keys = draw(st.integers(1, 12))
    n_markers = draw(st.integers(1, 4))
    T = draw(st.integers(0, 40))
    width = draw(st.integers(1, 5))
    marker_ids = np.array(draw(st.lists(st.integers(-1, n_markers - 1), min_size=T, max_size=T)), dtype=np.int32)
    flat = draw(st.lists(st.integers(-1, n_keys - 1), min_size=T * width, max_size=T * width))
    slots = np.array(flat, dtype=np.int32).reshape(T, width)
    return marker_ids, slots, n_markers, n_keys


@settings(max_examples=150, deadline=None)
@given(shards())
def test_backends_agree_with_brute_force(case):
    want = _brute(*case)
    for got in (_kernels.count_routing_numpy(*case), _kernels.count_routing_numba(*case)):
        for a, b in zip(got, want):
            assert a.dtype == np.int64
            assert np.array_equal(a, b)


def test_dispatch_uses_numba_by_default():
    assert _kernels.HAVE_NUMBA
    assert _kernels.USE_NUMBA == (os.environ.get("MOE_STEER_NUMBA", "1") not in ("0", "false", "no"))


@pytest.mark.parametrize("value,expected", [("0", "False"), ("no", "False"), ("1", "True")])
def test_env_flag_selects_backend(value, expected):
    env = dict(os.environ, MOE_STEER_NUMBA=value)
    out = subprocess.run(
        [sys.executable, "-c", "from moe_steer import _kernels; print(_kernels.USE_NUMBA)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected


def test_count_routing_casts_inputs():
    marker_ids = np.array([0, -1, 0], dtype=np.int64)
    slots = np.array([[0, 1], [1, 2], [2, -1]], dtype=np.int64)
    K, k, M = _kernels.count_routing(marker_ids, slots, 1, 3)
    assert K.tolist() == [1, 2, 2]
    assert k.tolist() == [[1, 1, 1]]
    assert M.tolist() == [2]
