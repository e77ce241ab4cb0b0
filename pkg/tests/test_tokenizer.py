import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umgen.core import AgentCategory, AgentState, Profile
from umgen.errors import FormatError, InputError
from umgen.tokenizer import (
    AttributeRange, RANGES, AGENT_SCALAR_ATTRS, MOD_AGENT, MOD_EGO, MOD_IMAGE,
    MOD_MAP, build_layout, clamp, detokenize_agent, detokenize_frame,
    detokenize_scalar, discretize, normalize, read_token_cache, tokenize_agent,
    tokenize_frame, tokenize_scalar, validate_token_frame, write_token_cache,
    TokenFrame,
)
from conftest import random_codebooks


SYM = AttributeRange(-64.0, 64.0)


def test_normalize_bounds_and_midpoint():
    assert normalize(-64.0, SYM) == 0.0
    assert normalize(0.0, SYM) == 0.5
    assert normalize(100.0, SYM) == 1.0  # clamped
    with pytest.raises(InputError):
        normalize(float("nan"), SYM)


def test_discretize_examples():
    assert discretize(0.5, 1024) == 512
    assert discretize(0.0, 1024) == 0
    assert discretize(1.0, 1024) == 1023
    with pytest.raises(InputError):
        discretize(1.5, 1024)


def test_detokenize_examples():
    assert detokenize_scalar(512, SYM, 1024) == pytest.approx(0.0625)
    assert detokenize_scalar(0, AttributeRange(0.0, 10.0), 1024) == \
        pytest.approx(10 * 0.5 / 1024)
    with pytest.raises(InputError):
        detokenize_scalar(1024, SYM, 1024)


@given(st.floats(min_value=-200, max_value=200, allow_nan=False))
@settings(max_examples=300, deadline=None)
def test_roundtrip_half_bin_bound(v):
    r = SYM
    decoded = detokenize_scalar(tokenize_scalar(v, r, 1024), r, 1024)
    assert abs(decoded - clamp(v, r)) <= r.width / 2048 + 1e-12


@given(st.floats(min_value=-100, max_value=100, allow_nan=False),
       st.floats(min_value=-100, max_value=100, allow_nan=False))
@settings(max_examples=200, deadline=None)
def test_tokenization_monotone(a, b):
    if a > b:
        a, b = b, a
    assert tokenize_scalar(a, SYM, 1024) <= tokenize_scalar(b, SYM, 1024)


def test_tokenize_agent_vehicle_example():
    agent = AgentState(x=0, y=0, z=0, vx=0, vy=0, vz=0, heading=0,
                       length=4.5, width=2.0, height=1.5,
                       category=AgentCategory.VEHICLE, active=True)
    ids = tokenize_agent(agent, 1024)
    assert list(ids) == [512, 512, 512, 512, 512, 512, 512, 307, 512, 307, 1024]


def test_tokenize_agent_pad_and_categories():
    assert list(tokenize_agent(AgentState(), 1024)) == [1027] * 11
    ped = AgentState(category=AgentCategory.PEDESTRIAN, active=True)
    assert tokenize_agent(ped, 1024)[10] == 1025


def test_pad_agent_roundtrip_fixed_point():
    ids = tokenize_agent(AgentState(), 1024)
    back = detokenize_agent(ids, 1024)
    assert back == AgentState()
    assert list(tokenize_agent(back, 1024)) == list(ids)


def test_layout_boundaries_desk():
    lay = build_layout(Profile.desk())
    b = np.where(lay.is_boundary)[0]
    assert list(b) == [0, 4, 5, 70, 71, 160, 161, 194]
    assert lay.vocab(MOD_EGO) == 1026
    assert lay.vocab(MOD_MAP) == 514
    assert lay.vocab(MOD_AGENT) == 1030
    assert lay.vocab(MOD_IMAGE) == 514
    assert lay.pad_id == 1027


def _sample_frame(profile, seed=0):
    from umgen.world import build_world, simulate_sequence
    seq = simulate_sequence(build_world(seed), 0, 3, profile)
    return seq.frames[-1]


@pytest.fixture(scope="module")
def fitted():
    """Profile, layout and codebooks fitted on real frames."""
    from umgen.trainer import fit_codebooks_from_dataset
    from umgen.world import build_world, simulate_sequence
    prof = Profile.desk(map_codebook=48, image_codebook=48)
    seqs = [simulate_sequence(build_world(ws), i, 10, prof)
            for ws in range(3) for i in range(2)]
    map_cb, img_cb = fit_codebooks_from_dataset(seqs, prof, iters=12)
    return prof, build_layout(prof), map_cb, img_cb, seqs


def test_tokenize_frame_layout(fitted):
    prof, lay, map_cb, img_cb, seqs = fitted
    tf = tokenize_frame(seqs[0].frames[0], map_cb, img_cb, lay)
    validate_token_frame(tf)
    assert tf.ids.shape == (lay.total,)
    tf2 = tokenize_frame(seqs[0].frames[0], map_cb, img_cb, lay)
    assert np.array_equal(tf.ids, tf2.ids)


def test_tokenize_frame_locality(fitted):
    prof, lay, map_cb, img_cb, seqs = fitted
    f = seqs[0].frames[0]
    agents = list(f.agents)
    assert agents[0].active
    agents[0] = AgentState(**{**agents[0].__dict__, "x": agents[0].x + 5.0})
    f2 = type(f)(ego_action=f.ego_action, agents=tuple(agents), map=f.map,
                 image=f.image, frame_index=f.frame_index)
    a = tokenize_frame(f, map_cb, img_cb, lay).ids
    b = tokenize_frame(f2, map_cb, img_cb, lay).ids
    diff = np.where(a != b)[0]
    x_pos = lay.payload_positions(MOD_AGENT)[0]
    assert list(diff) == [x_pos]


def test_frame_roundtrip_half_bin(fitted):
    prof, lay, map_cb, img_cb, seqs = fitted
    f = seqs[1].frames[2]
    tf = tokenize_frame(f, map_cb, img_cb, lay)
    back = detokenize_frame(tf, map_cb, img_cb, prof)
    for attr in ("dx", "dy", "dtheta"):
        orig = clamp(getattr(f.ego_action, attr), RANGES[attr])
        dec = getattr(back.ego_action, attr)
        assert abs(dec - orig) <= RANGES[attr].width / 2048 + 1e-12
    for a, b in zip(f.agents, back.agents):
        assert a.active == b.active
        if a.active:
            assert a.category == b.category
            for attr in AGENT_SCALAR_ATTRS:
                orig = clamp(getattr(a, attr), RANGES[attr])
                assert abs(getattr(b, attr) - orig) <= \
                    RANGES[attr].width / 2048 + 1e-12


def test_detokenize_rejects_reserved_in_payload(fitted):
    prof, lay, map_cb, img_cb, seqs = fitted
    tf = tokenize_frame(seqs[0].frames[0], map_cb, img_cb, lay)
    ids = tf.ids.copy()
    map_payload = lay.payload_positions(MOD_MAP)
    ids[map_payload[0]] = lay.start_id(MOD_MAP)
    with pytest.raises(FormatError):
        detokenize_frame(TokenFrame(ids=ids, layout=lay), map_cb, img_cb, prof)


def test_all_pad_agents_decode_inactive(fitted):
    prof, lay, map_cb, img_cb, seqs = fitted
    tf = tokenize_frame(seqs[0].frames[0], map_cb, img_cb, lay)
    ids = tf.ids.copy()
    ids[lay.payload_positions(MOD_AGENT)] = lay.pad_id
    back = detokenize_frame(TokenFrame(ids=ids, layout=lay), map_cb, img_cb, prof)
    assert all(not a.active for a in back.agents)


def test_map_exact_recovery_on_codebook_tiling(fitted):
    prof, lay, map_cb, img_cb, seqs = fitted
    # A map whose one-hot patches are exact codebook entries decodes exactly.
    f = seqs[2].frames[5]
    tf = tokenize_frame(f, map_cb, img_cb, lay)
    dec = detokenize_frame(tf, map_cb, img_cb, prof)
    tf2 = tokenize_frame(dec, map_cb, img_cb, lay)
    dec2 = detokenize_frame(tf2, map_cb, img_cb, prof)
    assert np.array_equal(dec.map.cells, dec2.map.cells)
    assert np.array_equal(tf.segment(MOD_MAP), tf2.segment(MOD_MAP))


def test_token_cache_roundtrip(tmp_path, fitted):
    prof, lay, map_cb, img_cb, seqs = fitted
    arrs = [np.stack([tokenize_frame(f, map_cb, img_cb, lay).ids
                      for f in s.frames]) for s in seqs[:2]]
    path = tmp_path / "tokens.bin"
    write_token_cache(str(path), arrs)
    assert path.read_bytes()[:4] == b"UMGT"
    back = read_token_cache(str(path))
    assert len(back) == 2
    for a, b in zip(arrs, back):
        assert np.array_equal(a, b)
