import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from planvmr import formats
from planvmr.errors import DegenerateInputError, InvariantError, ShapeError
from planvmr.plan_model import FrameInterval
from planvmr.retrieval import (FrameEmbeddingSet, Profile, RetrievalConfig, RetrievalHead, TokenHiddenStates,
                               cosine_sim, frame_vectors, project_frame, project_tokens, region_target,
                               rope_encode, rope_encode_many, rope_transpose_many, similarity_profile)


def _head(d=8, d_lm=6, d_fv=5, n=5, seed=0):
    return RetrievalHead.init(RetrievalConfig(d=d, d_lm=d_lm, d_fv=d_fv, n_region=n), seed)


# -- RoPE ------------------------------------------------------------------

def test_rope_pos_zero_identity():
    v = np.random.default_rng(0).normal(size=16)
    assert np.array_equal(rope_encode(v, 0), v)


def test_rope_unit_rotation():
    out = rope_encode([1.0, 0.0], 1, 10000.0)
    assert out == pytest.approx([math.cos(1), math.sin(1)], abs=1e-15)


def test_rope_matches_straight_line_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = 2 * int(rng.integers(1, 40))
        v, pos = rng.normal(size=d), int(rng.integers(0, 5000))
        assert np.allclose(rope_encode(v, pos), oracles.rope(v.tolist(), pos), atol=1e-9, rtol=0)


def test_rope_norm_preservation_100():
    rng = np.random.default_rng(2)
    for _ in range(100):
        v = rng.normal(size=64) * rng.uniform(0.1, 10)
        assert abs(np.linalg.norm(rope_encode(v, int(rng.integers(0, 10**5)))) - np.linalg.norm(v)) < 1e-9


@given(st.integers(0, 2000), st.integers(0, 2000), st.integers(0, 2000), st.integers(0, 10**6))
def test_rope_relative_position(p, q, s, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=32), rng.normal(size=32)
    a = rope_encode(x, p) @ rope_encode(y, q)
    b = rope_encode(x, p + s) @ rope_encode(y, q + s)
    assert abs(a - b) < 1e-9


def test_rope_errors():
    with pytest.raises(ShapeError):
        rope_encode([1.0, 2.0, 3.0], 1)
    with pytest.raises(Exception):
        rope_encode([1.0, float("nan")], 1)


def test_rope_transpose_inverts():
    rng = np.random.default_rng(3)
    vs, pos = rng.normal(size=(7, 10)), np.arange(7) * 3
    assert np.allclose(rope_transpose_many(rope_encode_many(vs, pos), pos), vs, atol=1e-12)


# -- projections -----------------------------------------------------------

def test_project_frame_identity_padded():
    cfg = RetrievalConfig(d=6, d_lm=2, d_fv=4)
    w_ret = np.zeros((6, 4))
    w_ret[:4, :4] = np.eye(4)
    head = RetrievalHead(np.ones((6, 2)), np.ones((6, 2)), w_ret, cfg)
    f = np.array([1.0, -2.0, 3.0, 0.5])
    assert np.array_equal(project_frame(head, f, 0), np.concatenate([f, [0.0, 0.0]]))


def test_project_frame_zero_feature():
    head = _head()
    assert np.array_equal(project_frame(head, np.zeros(5), 17), np.zeros(8))


def test_project_frame_matches_oracle():
    rng = np.random.default_rng(4)
    for seed in range(20):
        head = _head(d=10, d_fv=7, seed=seed)
        f, pos = rng.normal(size=7), int(rng.integers(0, 300))
        want = oracles.rope(oracles.matvec(head.w_ret.tolist(), f.tolist()), pos)
        assert np.allclose(project_frame(head, f, pos), want, atol=1e-9, rtol=0)


def test_project_frame_shape_mismatch():
    with pytest.raises(ShapeError):
        project_frame(_head(), np.ones(4), 0)


def test_project_tokens_examples():
    head = _head()
    head.w_start[:] = 0.0
    gs, ge = project_tokens(head, TokenHiddenStates(np.ones(6), np.ones(6)))
    assert np.array_equal(gs, np.zeros(8))
    head = _head(seed=3)
    e1 = np.zeros(6)
    e1[0] = 1.0
    gs, _ = project_tokens(head, TokenHiddenStates(e1, e1))
    assert np.array_equal(gs, head.w_start[:, 0])


def test_project_tokens_matches_naive_loop():
    rng = np.random.default_rng(5)
    head = _head(seed=9)
    for _ in range(20):
        hs, he = rng.normal(size=6), rng.normal(size=6)
        gs, ge = project_tokens(head, TokenHiddenStates(hs, he))
        assert np.allclose(gs, oracles.matvec(head.w_start.tolist(), hs.tolist()), atol=1e-12, rtol=0)
        assert np.allclose(ge, oracles.matvec(head.w_end.tolist(), he.tolist()), atol=1e-12, rtol=0)


@given(st.integers(0, 10**6), st.floats(-5, 5, allow_nan=False), st.integers(0, 500))
def test_projections_linear(seed, c, pos):
    rng = np.random.default_rng(seed)
    head = _head(seed=seed % 7)
    a, b = rng.normal(size=5), rng.normal(size=5)
    assert np.allclose(project_frame(head, a + b, pos), project_frame(head, a, pos) + project_frame(head, b, pos),
                       atol=1e-9)
    assert np.allclose(project_frame(head, c * a, pos), c * project_frame(head, a, pos), atol=1e-9)
    x, y = rng.normal(size=6), rng.normal(size=6)
    g1 = project_tokens(head, TokenHiddenStates(x + y, c * x))
    g0 = project_tokens(head, TokenHiddenStates(x, x))
    g2 = project_tokens(head, TokenHiddenStates(y, y))
    assert np.allclose(g1[0], g0[0] + g2[0], atol=1e-9)
    assert np.allclose(g1[1], c * g0[1], atol=1e-9)


# -- cosine ----------------------------------------------------------------

def test_cosine_examples():
    a = np.array([0.3, -1.2, 4.0])
    assert cosine_sim(a, a) == pytest.approx(1.0, abs=1e-15)
    assert cosine_sim([1, 0, 0], [0, 1, 0]) == 0.0
    assert cosine_sim([1, 1, 0], [1, 0, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert round(cosine_sim([1, 1, 0], [1, 0, 0]), 5) == 0.70711


def test_cosine_zero_raises():
    with pytest.raises(DegenerateInputError):
        cosine_sim([0, 0], [1, 0])


# -- region targets and profiles -------------------------------------------

def _frames(indices, d_fv=5, seed=0):
    rng = np.random.default_rng(seed)
    return FrameEmbeddingSet("v", indices, rng.normal(size=(len(indices), d_fv)))


def test_region_single_kept_frame():
    frames = _frames([0, 20, 40, 60])
    head = _head()
    moment = FrameInterval(15, 30)
    want = project_frame(head, frames.vectors[1], 1)
    assert np.allclose(region_target(frames, head, moment, "start"), want, atol=1e-12)
    assert np.allclose(region_target(frames, head, moment, "end"), want, atol=1e-12)


def test_region_n2_mean():
    frames = _frames([0, 10, 30, 50, 70])
    head = _head(n=2)
    got = region_target(frames, head, FrameInterval(10, 50), "start")
    want = (project_frame(head, frames.vectors[1], 1) + project_frame(head, frames.vectors[2], 2)) / 2
    assert np.allclose(got, want, atol=1e-12)


def test_region_neff_clamp():
    frames = _frames([0, 10, 30, 50, 70])
    head = _head(n=5)
    moment = FrameInterval(10, 50)
    s = region_target(frames, head, moment, "start")
    e = region_target(frames, head, moment, "end")
    assert np.allclose(s, e, atol=1e-12)
    want = np.mean([project_frame(head, frames.vectors[i], i) for i in (1, 2, 3)], axis=0)
    assert np.allclose(s, want, atol=1e-12)


def test_region_n1_boundary_frames():
    frames = _frames([0, 10, 30, 50, 70])
    head = _head(n=1)
    m = FrameInterval(5, 60)
    assert np.array_equal(region_target(frames, head, m, "start"), project_frame(head, frames.vectors[1], 1))
    assert np.array_equal(region_target(frames, head, m, "end"), project_frame(head, frames.vectors[3], 3))


def test_region_without_kept_frames():
    with pytest.raises(InvariantError):
        region_target(_frames([0, 20]), _head(), FrameInterval(5, 15), "start")


def test_profile_self_similarity_and_length():
    frames = _frames([0, 20, 40, 60, 80, 100])
    head = _head()
    g = frame_vectors(frames, head)[3]
    prof = similarity_profile(frames, head, g)
    assert len(prof) == 6 and list(prof.frames) == [0, 20, 40, 60, 80, 100]
    assert prof.sims[3] == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.abs(prof.sims) <= 1.0)
    single = similarity_profile(_frames([7]), head, g)
    assert len(single) == 1


def test_profile_planted_argmax():
    rng = np.random.default_rng(6)
    head = _head(d=16, d_fv=8)
    planted = rng.normal(size=8)
    vecs = rng.normal(scale=0.3, size=(6, 8))
    vecs[4] = planted
    frames = FrameEmbeddingSet("v", np.arange(6), vecs)
    g = project_frame(head, planted, 4)
    assert int(np.argmax(similarity_profile(frames, head, g).sims)) == 4


def test_frame_set_invariants():
    with pytest.raises(InvariantError):
        FrameEmbeddingSet("v", [3, 3], np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        FrameEmbeddingSet("v", [1, 2], np.zeros((3, 2)))
    with pytest.raises(Exception):
        FrameEmbeddingSet("v", [1], np.array([[np.inf]]))


def test_config_and_head_invariants():
    with pytest.raises(InvariantError):
        RetrievalConfig(d=7, d_lm=2, d_fv=2)
    with pytest.raises(ShapeError):
        RetrievalHead(np.zeros((4, 3)), np.zeros((4, 2)), np.zeros((4, 2)), RetrievalConfig(d=4, d_lm=2, d_fv=2))


def test_profile_coercions():
    p = Profile.from_pairs([(5, 0.1), (9, 0.7)])
    assert list(p) == [(5, 0.1), (9, 0.7)]


# -- binary formats --------------------------------------------------------

def test_feature_round_trip(tmp_path):
    frames = _frames([0, 20, 40], d_fv=3)
    formats.save_features(frames, tmp_path / "v.feat")
    back = formats.load_features(tmp_path / "v.feat")
    assert back.video_id == "v" and np.array_equal(back.vectors, frames.vectors)
    assert np.array_equal(back.frame_indices, frames.frame_indices)
    header = (tmp_path / "v.feat").read_bytes().split(b"\n", 1)[0]
    assert b'"d_fv":3' in header and b'"count":3' in header


def test_checkpoint_round_trip(tmp_path):
    head = _head(seed=11)
    formats.save_checkpoint(head, tmp_path / "h.ckpt")
    back = formats.load_checkpoint(tmp_path / "h.ckpt")
    assert back.config == head.config
    for name in ("w_start", "w_end", "w_ret"):
        assert np.array_equal(getattr(back, name), getattr(head, name))


def test_token_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    states = {1: TokenHiddenStates(rng.normal(size=4), rng.normal(size=4)),
              5: TokenHiddenStates(rng.normal(size=4), rng.normal(size=4))}
    formats.save_token_states("d1", states, tmp_path / "d1.tok")
    did, back = formats.load_token_states(tmp_path / "d1.tok")
    assert did == "d1" and sorted(back) == [1, 5]
    assert np.array_equal(back[5].h_rete, states[5].h_rete)


def test_truncated_file_is_shape_error(tmp_path):
    formats.save_features(_frames([0, 1]), tmp_path / "v.feat")
    raw = (tmp_path / "v.feat").read_bytes()
    (tmp_path / "v.feat").write_bytes(raw[:-8])
    with pytest.raises(ShapeError):
        formats.load_features(tmp_path / "v.feat")
