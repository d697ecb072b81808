"""Shared retrieval space: token and frame projections, RoPE, cosine profiles.

Frames are projected with ``W_ret`` and then rotated by their position in the
(subsampled) video; the [RETs]/[RETe] hidden states are projected with
``W_start``/``W_end`` and are not rotated. A frame's RoPE position is its
ordinal in the kept-frame sequence, not its raw frame index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from .errors import DegenerateInputError, InvariantError, NumericalError, ShapeError
from .plan_model import FrameInterval


@dataclass(frozen=True)
class RetrievalConfig:
    d_lm: int
    d_fv: int
    d: int = 512
    n_region: int = 5
    rope_base: float = 10000.0
    temperature: float = 0.07

    def __post_init__(self):
        for name in ("d", "d_lm", "d_fv", "n_region"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InvariantError(f"{name} must be a positive integer, got {v!r}")
        if self.d % 2:
            raise InvariantError(f"retrieval dimension d must be even for RoPE, got {self.d}")
        if not self.rope_base > 0:
            raise InvariantError("rope_base must be positive")
        if not self.temperature > 0:
            raise InvariantError("temperature must be positive")

    def to_dict(self) -> dict:
        return {
            "d": int(self.d),
            "d_lm": int(self.d_lm),
            "d_fv": int(self.d_fv),
            "n_region": int(self.n_region),
            "rope_base": float(self.rope_base),
            "temperature": float(self.temperature),
        }


@dataclass
class RetrievalHead:
    w_start: np.ndarray
    w_end: np.ndarray
    w_ret: np.ndarray
    config: RetrievalConfig

    def __post_init__(self):
        c = self.config
        self.w_start = np.asarray(self.w_start, dtype=np.float64)
        self.w_end = np.asarray(self.w_end, dtype=np.float64)
        self.w_ret = np.asarray(self.w_ret, dtype=np.float64)
        for name, shape in (("w_start", (c.d, c.d_lm)), ("w_end", (c.d, c.d_lm)), ("w_ret", (c.d, c.d_fv))):
            m = getattr(self, name)
            if m.shape != shape:
                raise ShapeError(f"{name} has shape {m.shape}, expected {shape}")
            if not np.all(np.isfinite(m)):
                raise NumericalError(f"{name} contains non-finite entries")

    @classmethod
    def init(cls, config: RetrievalConfig, seed: int) -> "RetrievalHead":
        """Gaussian init with variance 1/fan_in."""
        rng = np.random.default_rng(seed)
        c = config
        return cls(
            rng.normal(0.0, 1.0 / np.sqrt(c.d_lm), (c.d, c.d_lm)),
            rng.normal(0.0, 1.0 / np.sqrt(c.d_lm), (c.d, c.d_lm)),
            rng.normal(0.0, 1.0 / np.sqrt(c.d_fv), (c.d, c.d_fv)),
            c,
        )

    def copy(self) -> "RetrievalHead":
        return RetrievalHead(self.w_start.copy(), self.w_end.copy(), self.w_ret.copy(), self.config)

    def matrices(self) -> dict[str, np.ndarray]:
        return {"w_start": self.w_start, "w_end": self.w_end, "w_ret": self.w_ret}


@dataclass(frozen=True)
class FrameEmbeddingSet:
    """Per-frame feature vectors of one video, ordered by frame index."""

    video_id: str
    frame_indices: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.frame_indices, dtype=np.int64).reshape(-1)
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] != idx.shape[0]:
            raise ShapeError(
                f"video {self.video_id!r}: {idx.shape[0]} frame indices but vectors of shape {vec.shape}"
            )
        if idx.size and (np.any(idx < 0) or np.any(np.diff(idx) <= 0)):
            raise InvariantError(f"video {self.video_id!r}: frame indices must be non-negative and strictly increasing")
        if not np.all(np.isfinite(vec)):
            raise NumericalError(f"video {self.video_id!r}: non-finite feature values")
        object.__setattr__(self, "frame_indices", idx)
        object.__setattr__(self, "vectors", vec)

    @property
    def d_fv(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.frame_indices.shape[0]

    @property
    def features(self) -> list[tuple[int, np.ndarray]]:
        return list(zip(self.frame_indices.tolist(), self.vectors))

    def positions_in(self, moment: FrameInterval) -> np.ndarray:
        """Ordinal positions of the kept frames lying inside ``moment``."""
        lo = np.searchsorted(self.frame_indices, moment.start_frame, side="left")
        hi = np.searchsorted(self.frame_indices, moment.end_frame, side="right")
        return np.arange(lo, hi)

    def position_of(self, frame_index: int) -> int:
        pos = int(np.searchsorted(self.frame_indices, frame_index))
        if pos >= len(self) or self.frame_indices[pos] != frame_index:
            raise KeyError(f"frame {frame_index} not in video {self.video_id!r}")
        return pos


@dataclass(frozen=True)
class TokenHiddenStates:
    h_rets: np.ndarray
    h_rete: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.h_rets, dtype=np.float64).reshape(-1)
        e = np.asarray(self.h_rete, dtype=np.float64).reshape(-1)
        if s.shape != e.shape:
            raise ShapeError(f"[RETs] and [RETe] states differ in length: {s.shape[0]} vs {e.shape[0]}")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(e))):
            raise NumericalError("non-finite token hidden state")
        object.__setattr__(self, "h_rets", s)
        object.__setattr__(self, "h_rete", e)


def _rope_angles(d: int, base: float) -> np.ndarray:
    return base ** (-2.0 * np.arange(d // 2) / d)


def rope_encode(v, pos: int, base: float = 10000.0) -> np.ndarray:
    """Rotate each pair ``(v[2i], v[2i+1])`` by ``pos * base**(-2i/d)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError("rope_encode expects a 1-D vector")
    return rope_encode_many(v[None, :], np.asarray([pos]), base)[0]


def rope_encode_many(vs: np.ndarray, positions, base: float = 10000.0) -> np.ndarray:
    """Row-wise RoPE: row ``r`` of ``vs`` is rotated for position ``positions[r]``."""
    vs = np.asarray(vs, dtype=np.float64)
    d = vs.shape[-1]
    if d % 2:
        raise ShapeError(f"RoPE needs an even dimension, got {d}")
    if not np.all(np.isfinite(vs)):
        raise NumericalError("non-finite input to RoPE")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    ang = positions * _rope_angles(d, base)[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    x, y = vs[:, 0::2], vs[:, 1::2]
    out = np.empty_like(vs)
    out[:, 0::2] = x * cos - y * sin
    out[:, 1::2] = x * sin + y * cos
    return out


def rope_transpose_many(vs: np.ndarray, positions, base: float = 10000.0) -> np.ndarray:
    """Inverse rotation (RoPE is orthogonal, so this is also its transpose)."""
    return rope_encode_many(vs, -np.asarray(positions, dtype=np.float64), base)


def _check_vec(x, n: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != n:
        raise ShapeError(f"{what} has length {x.shape[0]}, expected {n}")
    return x


def project_frame(head: RetrievalHead, feature, pos: int) -> np.ndarray:
    feature = _check_vec(feature, head.config.d_fv, "frame feature")
    return rope_encode(head.w_ret @ feature, pos, head.config.rope_base)


def frame_vectors(frames: FrameEmbeddingSet, head: RetrievalHead) -> np.ndarray:
    """``v_frame`` for every kept frame, shape ``(n_frames, d)``."""
    if frames.d_fv != head.config.d_fv:
        raise ShapeError(f"video {frames.video_id!r} has d_fv={frames.d_fv}, head expects {head.config.d_fv}")
    proj = frames.vectors @ head.w_ret.T
    return rope_encode_many(proj, np.arange(len(frames)), head.config.rope_base)


def project_tokens(head: RetrievalHead, tokens: TokenHiddenStates) -> tuple[np.ndarray, np.ndarray]:
    d_lm = head.config.d_lm
    g_start = head.w_start @ _check_vec(tokens.h_rets, d_lm, "[RETs] hidden state")
    g_end = head.w_end @ _check_vec(tokens.h_rete, d_lm, "[RETe] hidden state")
    return g_start, g_end


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"cosine of vectors with lengths {a.shape[0]} and {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(m: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Cosine of every row of ``m`` against ``g``; zero rows raise."""
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    ng = np.linalg.norm(g)
    nm = np.linalg.norm(m, axis=1)
    if ng == 0.0 or np.any(nm == 0.0):
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return np.clip(m @ g / (nm * ng), -1.0, 1.0)


def region_positions(frames: FrameEmbeddingSet, moment: FrameInterval, side: str, n: int) -> np.ndarray:
    pos = frames.positions_in(moment)
    if pos.size == 0:
        raise InvariantError(
            f"moment ({moment.start_frame}, {moment.end_frame}) contains no kept frame of video {frames.video_id!r}"
        )
    n_eff = min(n, pos.size)
    if side == "start":
        return pos[:n_eff]
    if side == "end":
        return pos[-n_eff:]
    raise ValueError(f"side must be 'start' or 'end', got {side!r}")


def region_target(frames: FrameEmbeddingSet, head: RetrievalHead, moment: FrameInterval, side: str) -> np.ndarray:
    """Mean ``v_frame`` over the first (``side='start'``) or last N kept frames of the moment."""
    pos = region_positions(frames, moment, side, head.config.n_region)
    proj = frames.vectors[pos] @ head.w_ret.T
    return rope_encode_many(proj, pos, head.config.rope_base).mean(axis=0)


@dataclass(frozen=True)
class Profile:
    """Similarity of each kept frame to a query vector, in frame order."""

    frames: np.ndarray
    sims: np.ndarray = field(repr=False)

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        s = np.asarray(self.sims, dtype=np.float64).reshape(-1)
        if f.shape != s.shape:
            raise ShapeError("profile frames and similarities differ in length")
        object.__setattr__(self, "frames", f)
        object.__setattr__(self, "sims", s)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> "Profile":
        pairs = list(pairs)
        return cls([p[0] for p in pairs], [p[1] for p in pairs])

    @classmethod
    def from_values(cls, sims: Sequence[float]) -> "Profile":
        return cls(np.arange(len(sims)), sims)

    def __len__(self):
        return self.frames.shape[0]

    def __iter__(self) -> Iterator[tuple[int, float]]:
        return iter(zip(self.frames.tolist(), self.sims.tolist()))


ProfileLike = Union[Profile, Sequence[tuple[int, float]], Sequence[float], np.ndarray]


def as_profile(p: ProfileLike) -> Profile:
    if isinstance(p, Profile):
        return p
    if isinstance(p, np.ndarray) and p.ndim == 1:
        return Profile.from_values(p)
    p = list(p)
    if p and isinstance(p[0], (tuple, list)):
        return Profile.from_pairs(p)
    return Profile.from_values(p)


def similarity_profile(frames: FrameEmbeddingSet, head: RetrievalHead, g) -> Profile:
    if len(frames) == 0:
        raise InvariantError(f"video {frames.video_id!r} has no frames")
    g = _check_vec(g, head.config.d, "query embedding")
    return Profile(frames.frame_indices, cosine_rows(frame_vectors(frames, head), g))
