"""Planted-structure synthetic data.

Each video is a sequence of segments (one per plan action). Every segment
has its own random prototype feature; a frame's feature is its segment's
prototype plus Gaussian noise. Retrieval-token hidden states are a fixed
random linear map of the true region targets (computed with a reference
head) plus noise, so a head reaching near-zero loss exists by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .plan_model import Action, Dialogue, FrameInterval, Plan, Turn, TurnType
from .retrieval import FrameEmbeddingSet, RetrievalConfig, RetrievalHead, TokenHiddenStates, region_target
from .training import RetrievalSample


@dataclass(frozen=True)
class PlantedVideo:
    frames: FrameEmbeddingSet
    moments: tuple


@dataclass(frozen=True)
class PlantedQuery:
    video: int
    action: int
    moment: FrameInterval
    tokens: TokenHiddenStates


def segment_lengths(n_frames: int, min_len: int, max_len: int, rng: np.random.Generator) -> list[int]:
    """Random segment lengths in [min_len, max_len] that tile ``n_frames`` exactly."""
    lengths = []
    left = n_frames
    while left > 0:
        ok = [n for n in range(min_len, max_len + 1) if n == left or left - n >= min_len]
        n = int(rng.choice(ok)) if ok else left
        lengths.append(n)
        left -= n
    return lengths


def planted_videos(n_videos: int, n_frames: int, d_fv: int, noise: float, seed: int,
                   min_len: int = 6, max_len: int = 12, frame_step: int = 1) -> list[PlantedVideo]:
    rng = np.random.default_rng(seed)
    videos = []
    for v in range(n_videos):
        lengths = segment_lengths(n_frames, min_len, max_len, rng)
        protos = rng.normal(0.0, 1.0, (len(lengths), d_fv))
        feats, moments, start = [], [], 0
        for s, n in enumerate(lengths):
            feats.append(protos[s] + rng.normal(0.0, noise, (n, d_fv)))
            moments.append(FrameInterval(start * frame_step, (start + n - 1) * frame_step))
            start += n
        frames = FrameEmbeddingSet(f"video{v:03d}", np.arange(n_frames) * frame_step, np.vstack(feats))
        videos.append(PlantedVideo(frames, tuple(moments)))
    return videos


def token_maps(config: RetrievalConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """The planted target -> hidden-state maps, shape ``(d_lm, d)``.

    Columns are orthonormal scaled by ``sqrt(d_lm)``, so a unit target maps to
    hidden-state entries of unit variance and the map is invertible on its range.
    """
    if config.d_lm < config.d:
        raise ValueError("planted token maps need d_lm >= d")
    rng = np.random.default_rng(seed)
    maps = []
    for _ in range(2):
        q, _ = np.linalg.qr(rng.normal(size=(config.d_lm, config.d)))
        maps.append(q * np.sqrt(config.d_lm))
    return maps[0], maps[1]


def planted_tokens(t_start: np.ndarray, t_end: np.ndarray, maps, noise: float,
                   rng: np.random.Generator) -> TokenHiddenStates:
    a, b = maps
    d_lm = a.shape[0]
    u, w = t_start / np.linalg.norm(t_start), t_end / np.linalg.norm(t_end)
    return TokenHiddenStates(a @ u + rng.normal(0.0, noise, d_lm), b @ w + rng.normal(0.0, noise, d_lm))


def planted_queries(videos, reference: RetrievalHead, noise: float, seed: int) -> list[PlantedQuery]:
    """One query per (video, action)."""
    rng = np.random.default_rng(seed)
    maps = token_maps(reference.config, seed + 1)
    out = []
    for v, video in enumerate(videos):
        for a, moment in enumerate(video.moments, start=1):
            ts = region_target(video.frames, reference, moment, "start")
            te = region_target(video.frames, reference, moment, "end")
            out.append(PlantedQuery(v, a, moment, planted_tokens(ts, te, maps, noise, rng)))
    return out


def samples_for(queries, videos, head: RetrievalHead) -> list[RetrievalSample]:
    out = []
    for q in queries:
        frames = videos[q.video].frames
        out.append(RetrievalSample(
            q.tokens.h_rets, q.tokens.h_rete,
            region_target(frames, head, q.moment, "start"),
            region_target(frames, head, q.moment, "end"),
        ))
    return out


def holdout(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, held-out) index split."""
    order = np.random.default_rng(seed).permutation(n)
    n_out = int(round(fraction * n))
    return np.sort(order[n_out:]), np.sort(order[:n_out])


# -- corpus fixture --------------------------------------------------------

_VERBS = ("Chop", "Whisk", "Heat", "Pour", "Stir", "Sand", "Drill", "Glue", "Measure", "Fold", "Bake", "Rinse")
_OBJECTS = ("the onions", "the eggs", "the pan", "the batter", "the sauce", "the board", "two holes",
            "the edges", "the frame", "the dough", "the tray", "the rice")


def _action_text(rng) -> str:
    return f"{_VERBS[int(rng.integers(len(_VERBS)))]} {_OBJECTS[int(rng.integers(len(_OBJECTS)))]}."


def fixture_corpus(n_plans: int = 5, dialogues_per_plan: int = 6, raw_step: int = 5, stride: int = 20,
                   kept_frames: int = 40, d_fv: int = 32, d: int = 64, d_lm: int = 64,
                   noise: float = 0.05, seed: int = 0):
    """A small corpus: plans, dialogues, raw frame features, token states and the reference head.

    Raw frames are stored every ``raw_step`` frames; after subsampling with
    ``stride`` each video keeps ``kept_frames`` frames. Moment boundaries are
    multiples of ``stride`` so subsampling keeps the planted segments intact.
    Token states are planted against the kept-frame targets of the returned
    reference head, which serves as the training initialization.
    """
    rng = np.random.default_rng(seed)
    config = RetrievalConfig(d=d, d_lm=d_lm, d_fv=d_fv, n_region=5)
    reference = RetrievalHead.init(config, seed + 100)
    kept_videos = planted_videos(n_plans, kept_frames, d_fv, noise, seed + 1, min_len=5, max_len=8,
                                 frame_step=stride)
    plans, raw_frames, dialogues, tokens = [], {}, [], {}
    maps = token_maps(config, seed + 2)
    for p, kv in enumerate(kept_videos):
        pid = f"plan{p:02d}"
        domain = "cooking" if p % 2 == 0 else "diy"
        actions = []
        for a, m in enumerate(kv.moments, start=1):
            actions.append(Action(a, _action_text(rng), FrameInterval(m.start_frame, m.end_frame + stride - raw_step)))
        plans.append(Plan(pid, f"Synthetic task {p}", domain, tuple(actions)))
        # raw video: each kept frame's segment continues over the raw frames until the next kept one
        raw_idx = np.arange(0, kept_frames * stride, raw_step)
        seg_of = np.searchsorted([m.start_frame for m in kv.moments], raw_idx, side="right") - 1
        protos = np.array([kv.frames.vectors[kv.frames.positions_in(m)].mean(axis=0) for m in kv.moments])
        raw = protos[seg_of] + rng.normal(0.0, noise, (raw_idx.size, d_fv))
        kept_mask = raw_idx % stride == 0
        raw[kept_mask] = kv.frames.vectors
        raw_frames[pid] = FrameEmbeddingSet(pid, raw_idx, raw)
        kept = FrameEmbeddingSet(pid, raw_idx[kept_mask], raw[kept_mask])
        for k in range(dialogues_per_plan):
            did = f"{pid}_d{k:02d}"
            turns, states = [], {}
            for a, action in enumerate(actions, start=1):
                turns.append(Turn("What is next?" if a > 1 else "Let's start.", action.text, None,
                                  TurnType.PGAG, True, a))
                if rng.random() < 0.7:
                    states[len(turns)] = planted_tokens(
                        region_target(kept, reference, FrameInterval(*_snap(action.moment, stride)), "start"),
                        region_target(kept, reference, FrameInterval(*_snap(action.moment, stride)), "end"),
                        maps, noise, rng)
                    turns.append(Turn("Can you show me how that looks?", "Here is the video moment.", None,
                                      TurnType.CVMR, False, a))
                if rng.random() < 0.3:
                    mid = (action.moment.start_frame + action.moment.end_frame) // 2
                    turns.append(Turn("Is this the right step for what I'm doing?", action.text,
                                      int(mid - mid % raw_step), TurnType.VSG, False, a))
            dialogues.append(Dialogue(did, pid, tuple(turns)))
            tokens[did] = states
    return plans, dialogues, raw_frames, tokens, reference


def write_fixture(out_dir, seed: int = 0, **kwargs) -> None:
    """Write a raw corpus directory plus ``head_init.ckpt`` for the CLI."""
    from pathlib import Path

    from . import formats
    from .plan_model import Corpus, save_corpus

    out = Path(out_dir)
    plans, dialogues, raw_frames, tokens, reference = fixture_corpus(seed=seed, **kwargs)
    corpus = Corpus(plans=list(plans), dialogues={p.plan_id: [] for p in plans})
    for d in dialogues:
        corpus.dialogues[d.plan_id].append(d)
    save_corpus(corpus, out)
    for pid, frames in raw_frames.items():
        formats.save_features(frames, out / "features" / f"{pid}{formats.FEATURE_SUFFIX}")
    for did, states in tokens.items():
        if states:
            formats.save_token_states(did, states, out / "tokens" / f"{did}{formats.TOKEN_SUFFIX}")
    formats.save_checkpoint(reference, out / "head_init.ckpt")


def _snap(moment: FrameInterval, stride: int) -> tuple[int, int]:
    start = -(-moment.start_frame // stride) * stride
    end = moment.end_frame - moment.end_frame % stride
    return start, end
