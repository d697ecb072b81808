"""Candidate moment extraction from start/end similarity profiles.

All positions are 0-based ordinals into the profile; candidates report the
profile's frame indices. Ties in any argmax go to the earliest frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .errors import InvariantError, ShapeError
from .plan_model import FrameInterval
from .retrieval import Profile, ProfileLike, as_profile


class Method(str, Enum):
    FIRM = "firm"
    ADJUSTED = "adjusted"
    MIDFRAME_EXPAND = "midframe_expand"


@dataclass(frozen=True)
class MomentCandidate:
    interval: FrameInterval
    score: float
    method: Method
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not np.isfinite(self.score):
            raise InvariantError("candidate score must be finite")

    @property
    def start(self) -> int:
        return self.interval.start_frame

    @property
    def end(self) -> int:
        return self.interval.end_frame


@dataclass(frozen=True)
class ExtractionParams:
    k: int = 1
    threshold: float = 0.35

    def __post_init__(self):
        if self.k < 1:
            raise InvariantError("k must be at least 1")
        _check_tau(self.threshold)


def _check_tau(tau: float) -> None:
    if not -1.0 <= tau <= 1.0:
        raise InvariantError(f"threshold must lie in [-1, 1], got {tau}")


def _pair(profile_start: ProfileLike, profile_end: ProfileLike) -> tuple[Profile, Profile]:
    ps, pe = as_profile(profile_start), as_profile(profile_end)
    if len(ps) == 0 or len(pe) == 0:
        raise InvariantError("similarity profile is empty")
    if not np.array_equal(ps.frames, pe.frames):
        raise ShapeError("start and end profiles must cover the same frames")
    return ps, pe


def _interval(frames: np.ndarray, i: int, j: int) -> FrameInterval:
    return FrameInterval(int(frames[i]), int(frames[j]))


def extract_firm(profile_start: ProfileLike, profile_end: ProfileLike) -> MomentCandidate:
    ps, pe = _pair(profile_start, profile_end)
    i, j = int(np.argmax(ps.sims)), int(np.argmax(pe.sims))
    score = float(ps.sims[i] + pe.sims[j])
    if j < i:
        return MomentCandidate(_interval(ps.frames, i, i), score, Method.FIRM, degenerate=True)
    return MomentCandidate(_interval(ps.frames, i, j), score, Method.FIRM)


def _walk(ps: Profile, pe: Profile, i: int, j: int, tau: float) -> tuple[int, int]:
    return kernels.walk_down(ps.sims, i, tau), kernels.walk_up(pe.sims, j, tau)


def extract_adjusted(profile_start: ProfileLike, profile_end: ProfileLike, tau: float = 0.35) -> MomentCandidate:
    """Walk outward from each argmax while similarity stays at or above ``tau``.

    The start boundary walks down from the start-profile argmax, the end
    boundary walks up from the end-profile argmax. If the walls cross, the
    firm fallback is returned, flagged ``degenerate``.
    """
    _check_tau(tau)
    ps, pe = _pair(profile_start, profile_end)
    i, j = int(np.argmax(ps.sims)), int(np.argmax(pe.sims))
    t_start, t_end = _walk(ps, pe, i, j, tau)
    score = float(ps.sims[i] + pe.sims[j])
    if t_end < t_start:
        firm = extract_firm(ps, pe)
        return MomentCandidate(firm.interval, score, Method.ADJUSTED, degenerate=True)
    return MomentCandidate(_interval(ps.frames, t_start, t_end), score, Method.ADJUSTED)


def _top(sims: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated values keeps the earliest frame first among ties
    return np.argsort(-sims, kind="stable")[:k]


def extract_topk(profile_start: ProfileLike, profile_end: ProfileLike, params: ExtractionParams,
                 method: Method = Method.FIRM) -> list[MomentCandidate]:
    """Up to ``k`` candidates from the top-k start frames x top-k end frames.

    Each seed pair scores ``sim_start + sim_end``. For the adjusted method the
    pair is first widened by the threshold walk; admissibility (end >= start)
    is checked on the final interval. Duplicate intervals keep their best
    score; ordering is score descending, then start, then end.
    """
    method = Method(method)
    if method is Method.MIDFRAME_EXPAND:
        raise InvariantError("top-k enumeration supports the firm and adjusted methods only")
    ps, pe = _pair(profile_start, profile_end)
    k = params.k
    tau = params.threshold
    found: dict[tuple[int, int], float] = {}
    for i in _top(ps.sims, k):
        for j in _top(pe.sims, k):
            i, j = int(i), int(j)
            a, b = _walk(ps, pe, i, j, tau) if method is Method.ADJUSTED else (i, j)
            if b < a:
                continue
            score = float(ps.sims[i] + pe.sims[j])
            if score > found.get((a, b), -np.inf):
                found[(a, b)] = score
    if not found:
        if method is Method.ADJUSTED:
            return [extract_adjusted(ps, pe, tau)]
        return [extract_firm(ps, pe)]
    ranked = sorted(found.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))[:k]
    return [MomentCandidate(_interval(ps.frames, a, b), s, method) for (a, b), s in ranked]


def midframe_expand(profile_mid: ProfileLike, tau_b: float = 0.3) -> MomentCandidate:
    """Grow the best single frame over contiguous neighbours with similarity above ``tau_b``."""
    p = as_profile(profile_mid)
    if len(p) == 0:
        raise InvariantError("similarity profile is empty")
    seed = int(np.argmax(p.sims))
    lo, hi = kernels.expand_above(p.sims, seed, tau_b)
    return MomentCandidate(_interval(p.frames, lo, hi), float(p.sims[seed]), Method.MIDFRAME_EXPAND)


def extract(profile_start: ProfileLike, profile_end: ProfileLike, method: Method, k: int = 1,
            tau: float = 0.35, tau_b: float = 0.3, profile_mid: ProfileLike = None) -> list[MomentCandidate]:
    """Dispatch used by evaluation: a ranked candidate list for one query."""
    method = Method(method)
    if method is Method.MIDFRAME_EXPAND:
        if profile_mid is None:
            raise InvariantError("midframe expansion needs a mid profile")
        return [midframe_expand(profile_mid, tau_b)]
    if k == 1:
        if method is Method.FIRM:
            return [extract_firm(profile_start, profile_end)]
        return [extract_adjusted(profile_start, profile_end, tau)]
    return extract_topk(profile_start, profile_end, ExtractionParams(k=k, threshold=tau), method)
