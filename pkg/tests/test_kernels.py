import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from planvmr import _kernels_py, kernels

compiled = pytest.importorskip("planvmr._kernels")

sims_lists = st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=60)
taus = st.floats(-1, 1, allow_nan=False)


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@given(st.lists(st.integers(0, 5), max_size=40), st.lists(st.integers(0, 5), max_size=40))
def test_lcs_backends_agree_with_dp(a, b):
    want = oracles.lcs(a, b)
    assert _kernels_py.lcs_length(a, b) == want
    assert compiled.lcs_length(np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)) == want


@given(sims_lists, taus, st.data())
def test_walks_agree(sims, tau, data):
    idx = data.draw(st.integers(0, len(sims) - 1))
    arr = np.array(sims)
    assert compiled.walk_down(arr, idx, tau) == _kernels_py.walk_down(sims, idx, tau)
    assert compiled.walk_up(arr, idx, tau) == _kernels_py.walk_up(sims, idx, tau)
    assert compiled.expand_above(arr, idx, tau) == _kernels_py.expand_above(sims, idx, tau)


def test_walk_check_then_assign():
    # the seed itself below tau: the walk stops without moving
    assert _kernels_py.walk_down([0.9, 0.1], 1, 0.5) == 1
    assert compiled.walk_up(np.array([0.1, 0.9]), 0, 0.5) == 0


def test_expand_matches_oracle():
    sims = [0.1, 0.4, 0.9, 0.5, 0.2]
    assert kernels.expand_above(sims, 2, 0.3) == oracles.expand(sims, 0.3) == (1, 3)


def test_dispatch_wrappers_accept_lists():
    assert kernels.lcs_length([1, 2, 3], [1, 3]) == 2
    assert kernels.walk_down([0.5, 0.6, 0.9], 2, 0.55) == 1
