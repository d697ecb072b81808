"""Kernel dispatch.

The compiled ``_kernels`` extension is used when it imports; otherwise the
pure-Python module is used. Set ``PLANVMR_PURE_PYTHON=1`` to force the
fallback.
"""

import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("PLANVMR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def _ints(seq):
    return np.ascontiguousarray(seq, dtype=np.int64)


def _floats(seq):
    return np.ascontiguousarray(seq, dtype=np.float64)


if _compiled is not None:

    def lcs_length(a, b):
        return _compiled.lcs_length(_ints(a), _ints(b))

    def walk_down(sims, idx, tau):
        return _compiled.walk_down(_floats(sims), int(idx), float(tau))

    def walk_up(sims, idx, tau):
        return _compiled.walk_up(_floats(sims), int(idx), float(tau))

    def expand_above(sims, idx, tau):
        return _compiled.expand_above(_floats(sims), int(idx), float(tau))

else:

    def lcs_length(a, b):
        return _kernels_py.lcs_length(list(a), list(b))

    def walk_down(sims, idx, tau):
        return _kernels_py.walk_down(_floats(sims).tolist(), int(idx), float(tau))

    def walk_up(sims, idx, tau):
        return _kernels_py.walk_up(_floats(sims).tolist(), int(idx), float(tau))

    def expand_above(sims, idx, tau):
        return _kernels_py.expand_above(_floats(sims).tolist(), int(idx), float(tau))
