"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``.

Signatures and results match the compiled module exactly; ``kernels`` picks
one of the two at import time.
"""


def lcs_length(a, b):
    """Length of the longest common subsequence of two integer sequences."""
    if len(a) < len(b):
        a, b = b, a
    m = len(b)
    if m == 0:
        return 0
    prev = [0] * (m + 1)
    for x in a:
        cur = [0] * (m + 1)
        for j in range(m):
            if x == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = cur[j] if cur[j] > prev[j + 1] else prev[j + 1]
        prev = cur
    return prev[m]


def walk_down(sims, idx, tau):
    # check-then-assign, exactly as the adjusted-extraction pseudocode
    t = idx
    i = idx
    while i >= 0:
        if sims[i] < tau:
            break
        t = i
        i -= 1
    return t


def walk_up(sims, idx, tau):
    t = idx
    n = len(sims)
    i = idx
    while i < n:
        if sims[i] < tau:
            break
        t = i
        i += 1
    return t


def expand_above(sims, idx, tau):
    """Grow ``[idx, idx]`` over neighbours whose similarity is strictly above ``tau``."""
    lo = idx
    while lo > 0 and sims[lo - 1] > tau:
        lo -= 1
    hi = idx
    n = len(sims)
    while hi < n - 1 and sims[hi + 1] > tau:
        hi += 1
    return lo, hi
