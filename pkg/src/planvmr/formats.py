"""Binary feature, token-state and checkpoint files.

Every file is one JSON header line terminated by ``\\n`` followed by raw
little-endian float64 values, row-major.

* features: header ``{"video_id", "d_fv", "count", "frame_indices"}``, then
  ``count * d_fv`` values.
* token states: header ``{"video_id", "d_lm", "count", "frame_indices"}``
  where ``video_id`` holds the dialogue id and ``frame_indices`` the turn
  indices; each row is ``[RETs] || [RETe]`` so the payload is
  ``count * 2 * d_lm`` values.
* head checkpoint: header ``{"d", "d_lm", "d_fv", "n_region", "rope_base",
  "temperature"}``, then W_start, W_end, W_ret.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from .retrieval import FrameEmbeddingSet, RetrievalConfig, RetrievalHead, TokenHiddenStates

FEATURE_SUFFIX = ".feat"
TOKEN_SUFFIX = ".tok"
_LE = np.dtype("<f8")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _envelope(header: dict, arrays) -> bytes:
    head = json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"
    body = b"".join(np.ascontiguousarray(a, dtype=_LE).tobytes() for a in arrays)
    return head + body


def _read_envelope(path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing JSON header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: bad header: {exc}") from None
    body = raw[nl + 1:]
    if len(body) % 8:
        raise DataError(f"{path}: payload length {len(body)} is not a multiple of 8")
    return header, np.frombuffer(body, dtype=_LE).astype(np.float64)


def _need(header: dict, keys, path) -> None:
    missing = [k for k in keys if k not in header]
    if missing:
        raise DataError(f"{path}: header missing {', '.join(missing)}")


def feature_bytes(frames: FrameEmbeddingSet) -> bytes:
    header = {
        "video_id": frames.video_id,
        "d_fv": int(frames.d_fv),
        "count": len(frames),
        "frame_indices": frames.frame_indices.tolist(),
    }
    return _envelope(header, [frames.vectors])


def save_features(frames: FrameEmbeddingSet, path) -> None:
    atomic_write_bytes(path, feature_bytes(frames))


def load_features(path) -> FrameEmbeddingSet:
    header, data = _read_envelope(path)
    _need(header, ("video_id", "d_fv", "count", "frame_indices"), path)
    count, d_fv = int(header["count"]), int(header["d_fv"])
    if len(header["frame_indices"]) != count or data.size != count * d_fv:
        raise ShapeError(f"{path}: header declares {count}x{d_fv} values, payload has {data.size}")
    return FrameEmbeddingSet(header["video_id"], header["frame_indices"], data.reshape(count, d_fv))


def save_token_states(dialogue_id: str, states: dict[int, TokenHiddenStates], path) -> None:
    turns = sorted(states)
    d_lm = states[turns[0]].h_rets.shape[0] if turns else 0
    rows = np.array([np.concatenate([states[t].h_rets, states[t].h_rete]) for t in turns]).reshape(len(turns), 2 * d_lm)
    header = {"video_id": dialogue_id, "d_lm": int(d_lm), "count": len(turns), "frame_indices": turns}
    atomic_write_bytes(path, _envelope(header, [rows]))


def load_token_states(path) -> tuple[str, dict[int, TokenHiddenStates]]:
    header, data = _read_envelope(path)
    _need(header, ("video_id", "d_lm", "count", "frame_indices"), path)
    count, d_lm = int(header["count"]), int(header["d_lm"])
    if len(header["frame_indices"]) != count or data.size != count * 2 * d_lm:
        raise ShapeError(f"{path}: header declares {count} rows of 2x{d_lm}, payload has {data.size} values")
    rows = data.reshape(count, 2 * d_lm)
    states = {int(t): TokenHiddenStates(r[:d_lm], r[d_lm:]) for t, r in zip(header["frame_indices"], rows)}
    return header["video_id"], states


def checkpoint_bytes(head: RetrievalHead) -> bytes:
    return _envelope(head.config.to_dict(), [head.w_start, head.w_end, head.w_ret])


def save_checkpoint(head: RetrievalHead, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(head))


def load_checkpoint(path) -> RetrievalHead:
    header, data = _read_envelope(path)
    _need(header, ("d", "d_lm", "d_fv", "n_region", "rope_base", "temperature"), path)
    cfg = RetrievalConfig(
        d=int(header["d"]),
        d_lm=int(header["d_lm"]),
        d_fv=int(header["d_fv"]),
        n_region=int(header["n_region"]),
        rope_base=float(header["rope_base"]),
        temperature=float(header["temperature"]),
    )
    n_lm, n_fv = cfg.d * cfg.d_lm, cfg.d * cfg.d_fv
    if data.size != 2 * n_lm + n_fv:
        raise ShapeError(f"{path}: checkpoint payload has {data.size} values, expected {2 * n_lm + n_fv}")
    return RetrievalHead(
        data[:n_lm].reshape(cfg.d, cfg.d_lm),
        data[n_lm:2 * n_lm].reshape(cfg.d, cfg.d_lm),
        data[2 * n_lm:].reshape(cfg.d, cfg.d_fv),
        cfg,
    )
